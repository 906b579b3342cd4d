"""Optimization loop, evaluation and the three-variant ablation harness."""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import queue
import threading
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import dataio, objective, panosim
from .equirect import AugmentationConfig, augment
from .model import Model, ModelConfig, build, forward, load_checkpoint, save_checkpoint

log = logging.getLogger(__name__)

DECAY_MODES = ("decoupled", "lr_decay")
ABLATION_ROWS = (("static", "Static"), ("static_vp", "Static + VP"), ("static_vp_dl", "Static + VP + DL"))


@dataclass
class TrainConfig:
    model: ModelConfig = field(default_factory=lambda: ModelConfig.desk(height=64))
    dataset: str = ""
    out: str = "runs/train"
    batch_size: int = 4
    lr: float = 1e-4
    weight_decay: float = 1e-5
    decay_mode: str = "decoupled"
    epochs: int = 40
    max_steps: int | None = None
    augmentation: AugmentationConfig = field(default_factory=AugmentationConfig)
    seed: int = 0
    split: str = "train"
    eye: str = "top"
    checkpoint_every: int = 0  # steps; 0 keeps only the initial and final checkpoints
    deterministic: bool = False
    prefetch: int = 2

    def __post_init__(self):
        if self.batch_size < 1 or self.lr < 0 or self.weight_decay < 0 or self.epochs < 0:
            raise ValueError("batch size must be positive and lr / weight decay / epochs non-negative")
        if self.decay_mode not in DECAY_MODES:
            raise ValueError(f"decay_mode must be one of {DECAY_MODES}")
        if self.eye not in ("top", "bottom"):
            raise ValueError("eye must be 'top' or 'bottom'")

    @property
    def resolution(self) -> tuple[int, int]:
        return self.model.width, self.model.height

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["model"] = self.model.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "model" in d:
            d["model"] = ModelConfig.from_dict(d["model"])
        if "augmentation" in d:
            aug = dict(d["augmentation"])
            for k in ("brightness", "contrast", "saturation", "hue"):
                if k in aug:
                    aug[k] = tuple(aug[k])
            d["augmentation"] = AugmentationConfig(**aug)
        return cls(**d)


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(params: dict, grads: dict, state: AdamState, lr: float, weight_decay: float = 0.0,
              decay_mode: str = "decoupled") -> dict:
    """One bias-corrected Adam update; returns new parameter arrays and advances ``state``.

    ``decoupled`` shrinks each parameter by ``lr * weight_decay`` before the
    Adam delta.  ``lr_decay`` instead scales the step size by
    ``1 / (1 + weight_decay * step)`` and applies no shrinkage.
    """
    for name, p in params.items():
        g = grads.get(name)
        if g is not None and np.shape(g) != np.shape(p):
            raise ValueError(f"gradient for {name} has shape {np.shape(g)}, parameter has {np.shape(p)}")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    step_lr = lr / (1.0 + weight_decay * (t - 1)) if decay_mode == "lr_decay" else lr
    out = {}
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        m = state.m.get(name, np.zeros_like(p))
        v = state.v.get(name, np.zeros_like(p))
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        state.m[name], state.v[name] = m, v
        mhat = m / (1 - b1**t)
        vhat = v / (1 - b2**t)
        q = p
        if decay_mode == "decoupled" and weight_decay:
            q = q - lr * weight_decay * q
        out[name] = (q - step_lr * mhat / (np.sqrt(vhat) + state.eps)).astype(p.dtype)
    return out


# ---------------------------------------------------------------------------
# Data pipeline
# ---------------------------------------------------------------------------


class DatasetView:
    """Records of one split plus a decoded-sample cache."""

    def __init__(self, root, split: str | None = None, eye: str = "top"):
        self.root = Path(root)
        self.manifest = dataio.read_manifest(self.root / "manifest.jsonl")
        self.records = self.manifest.records if split is None else self.manifest.split(split)
        if not self.records:
            raise ValueError(f"{self.root}: split {split!r} is empty")
        self.eye = eye
        self._cache: dict[str, object] = {}
        self._lock = threading.Lock()

    def __len__(self) -> int:
        return len(self.records)

    def check_resolution(self, width: int, height: int) -> None:
        if (self.manifest.width, self.manifest.height) != (width, height):
            raise ValueError(
                f"dataset is {self.manifest.width}x{self.manifest.height} but the model expects {width}x{height}"
            )

    def sample(self, i: int):
        rec = self.records[i]
        with self._lock:
            hit = self._cache.get(rec.frame_id)
        if hit is None:
            hit = dataio.load_sample(self.root, rec, stereo=self.manifest.stereo, eye=self.eye)
            with self._lock:
                self._cache[rec.frame_id] = hit
        return hit


def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch, 11]).permutation(n)


def make_batch(view: DatasetView, indices, aug: AugmentationConfig, seed: int, epoch: int) -> dict:
    """Stack augmented samples; each sample's augmentation seed depends only on (seed, epoch, index)."""
    arrays = []
    for i in indices:
        s = augment(view.sample(int(i)), aug, [seed, epoch, int(i)])
        arrays.append(dataio.training_arrays(s, view.manifest.d_max))
    batch = {k: np.stack([a[k] for a in arrays]) for k in arrays[0]}
    batch["frame_ids"] = [view.records[int(i)].frame_id for i in indices]
    return batch


def iter_batches(view: DatasetView, cfg: TrainConfig, epoch: int, deterministic: bool):
    """Batches for one epoch; a producer thread fills a bounded queue unless deterministic."""
    order = epoch_order(len(view), cfg.seed, epoch)
    chunks = [order[i : i + cfg.batch_size] for i in range(0, len(order), cfg.batch_size)]
    if deterministic or cfg.prefetch < 1:
        for c in chunks:
            yield make_batch(view, c, cfg.augmentation, cfg.seed, epoch)
        return
    q: queue.Queue = queue.Queue(maxsize=cfg.prefetch)
    done = object()
    stop = threading.Event()

    def produce():
        try:
            for c in chunks:
                if stop.is_set():
                    return
                q.put(make_batch(view, c, cfg.augmentation, cfg.seed, epoch))
        except Exception as e:  # surfaced on the consumer side
            q.put(e)
        q.put(done)

    th = threading.Thread(target=produce, daemon=True)
    th.start()
    try:
        while True:
            item = q.get()
            if item is done:
                break
            if isinstance(item, Exception):
                raise item
            yield item
    finally:
        stop.set()
        while th.is_alive():
            try:
                q.get_nowait()
            except queue.Empty:
                th.join(timeout=0.01)


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


class NonFiniteLossError(RuntimeError):
    def __init__(self, message: str, dump_path: Path):
        super().__init__(message)
        self.dump_path = dump_path


@dataclass
class TrainResult:
    model: Model
    out_dir: Path
    log_path: Path
    checkpoints: list
    history: list


def loss_on_batch(model: Model, batch: dict) -> objective.LossTerms:
    pred = forward(model, batch["color"])
    target = {k: batch[k] for k in ("depth01", "normal01", "normal_valid")}
    return objective.total_loss(pred, target)


def train(cfg: TrainConfig, model: Model | None = None) -> TrainResult:
    """Run the configured schedule; writes ``steps.jsonl`` and ``.ohk`` checkpoints under ``cfg.out``."""
    view = DatasetView(cfg.dataset, cfg.split, cfg.eye)
    view.check_resolution(*cfg.resolution)
    model = model or build(cfg.model)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "train_config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))
    log_path = out / "steps.jsonl"
    meta = {"decay_mode": cfg.decay_mode, "seed": cfg.seed}
    ckpts = [out / "ckpt_000000.ohk"]
    save_checkpoint(model, ckpts[0], {**meta, "step": 0})
    history = []
    state = AdamState()
    step = 0
    names = list(model.params)
    with open(log_path, "w") as logf:
        for epoch in range(cfg.epochs):
            for batch in iter_batches(view, cfg, epoch, cfg.deterministic):
                if cfg.max_steps is not None and step >= cfg.max_steps:
                    break
                model.zero_grad()
                terms = loss_on_batch(model, batch)
                vals = [float(terms.total.data), float(terms.depth.data), float(terms.normal.data)]
                if not all(math.isfinite(v) for v in vals):
                    dump = out / f"nonfinite_step{step:06d}.npz"
                    np.savez(dump, **{k: v for k, v in batch.items() if k != "frame_ids"},
                             frame_ids=np.array(batch["frame_ids"]))
                    raise NonFiniteLossError(
                        f"non-finite loss at step {step} (frames {batch['frame_ids']}); batch written to {dump}", dump
                    )
                ad.backward(terms.total)
                new = adam_step(
                    {n: model.params[n].data for n in names},
                    {n: model.params[n].grad for n in names},
                    state, cfg.lr, cfg.weight_decay, cfg.decay_mode,
                )
                for n in names:
                    model.params[n] = ad.Tensor(new[n], requires_grad=True)
                step += 1
                row = {"step": step, "epoch": epoch, "L_Total": vals[0], "L_Depth": vals[1], "L_Normal": vals[2]}
                history.append(row)
                logf.write(json.dumps(row) + "\n")
                if cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
                    ckpts.append(out / f"ckpt_{step:06d}.ohk")
                    save_checkpoint(model, ckpts[-1], {**meta, "step": step})
            if cfg.max_steps is not None and step >= cfg.max_steps:
                break
    if step > 0:
        ckpts.append(out / "final.ohk")
        save_checkpoint(model, ckpts[-1], {**meta, "step": step})
    return TrainResult(model, out, log_path, ckpts, history)


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------


@dataclass
class EvalResult:
    report: objective.MetricReport
    per_image: dict
    metadata: dict

    def to_json(self) -> str:
        return objective.report_json(self.report, **self.metadata)

    def table(self, label: str = "model") -> str:
        return objective.format_table({label: self.report})


def score_image(depth_pred01, normal_pred01, target: dict) -> objective.MetricReport:
    """Metrics for one image from channel-first prediction/target arrays."""
    return objective.image_report(
        np.asarray(depth_pred01)[0],
        np.asarray(target["depth01"])[0],
        np.moveaxis(np.asarray(normal_pred01), 0, -1),
        np.moveaxis(np.asarray(target["normal01"]), 0, -1),
        target["normal_valid"],
    )


def evaluate(model: Model | str | Path, dataset, split: str = "test", batch_size: int = 4,
             eye: str = "top") -> EvalResult:
    """Per-image metrics on a dataset split, averaged over images."""
    if not isinstance(model, Model):
        model = load_checkpoint(model)
    view = DatasetView(dataset, split, eye)
    view.check_resolution(model.config.width, model.config.height)
    per_image = {}
    with ad.no_grad():
        for start in range(0, len(view), batch_size):
            idx = range(start, min(start + batch_size, len(view)))
            targets = [dataio.training_arrays(view.sample(i), view.manifest.d_max) for i in idx]
            x = np.stack([t["color"] for t in targets])
            pred = forward(model, x)
            for k, (i, t) in enumerate(zip(idx, targets)):
                per_image[view.records[i].frame_id] = score_image(pred.depth01.data[k], pred.normal01.data[k], t)
    report = objective.MetricReport.mean_of(list(per_image.values()))
    meta = {"model": model.config.variant, "dataset": str(dataset), "split": split, "images": len(per_image),
            "aggregation": "per-image mean"}
    return EvalResult(report, per_image, meta)


# ---------------------------------------------------------------------------
# Ablation
# ---------------------------------------------------------------------------


@dataclass
class AblationResult:
    rows: dict  # label -> MetricReport
    out_dir: Path

    def table(self) -> str:
        return objective.format_table(self.rows, label="Dataset")

    def to_json(self) -> str:
        return json.dumps({k: v.as_dict() for k, v in self.rows.items()}, indent=2)


def ablation_run(gen: panosim.GenConfig, train_cfg: TrainConfig, out_dir) -> AblationResult:
    """Generate the three variants with one seed, train one model each, score all on the DL test split."""
    out = Path(out_dir)
    datasets = {}
    for variant, _ in ABLATION_ROWS:
        root = out / "data" / variant
        panosim.generate_dataset(dataclasses.replace(gen, variant=variant), root)
        datasets[variant] = root
    rows = {}
    for variant, label in ABLATION_ROWS:
        cfg = dataclasses.replace(train_cfg, dataset=str(datasets[variant]), out=str(out / "runs" / variant))
        res = train(cfg)
        log.info("trained %s for %d steps", variant, len(res.history))
        rows[label] = evaluate(res.model, datasets["static_vp_dl"], "test").report
    result = AblationResult(rows, out)
    (out / "ablation.json").write_text(result.to_json())
    (out / "ablation.txt").write_text(result.table() + "\n")
    return result
