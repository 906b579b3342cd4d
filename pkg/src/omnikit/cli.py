"""``omnikit`` command line: generate, validate, train, eval, ablate, gradcheck, params, augpreview.

Exit codes: 0 success, 1 validation or check failure, 2 usage / configuration error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import checks, dataio, panosim, trainer
from .equirect import AugmentationConfig, augment
from .model import ModelConfig, count_parameters, describe

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _load_json(path) -> dict:
    if not path:
        return {}
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise UsageError(f"config file not found: {path}") from None
    except json.JSONDecodeError as e:
        raise UsageError(f"config file {path} is not valid JSON: {e}") from None


def _gen_config(args, doc: dict) -> panosim.GenConfig:
    doc = dict(doc)
    for key in ("variant", "frames_per_path", "height", "scenes", "train_paths", "d_max"):
        v = getattr(args, key, None)
        if v is not None:
            doc[key] = v
    if getattr(args, "stereo", False):
        doc["stereo"] = True
    if args.seed is not None:
        doc["seed"] = args.seed
    if "height" in doc and "width" not in doc:
        doc["width"] = 2 * doc["height"]
    return panosim.GenConfig(**doc)


def _train_config(args, doc: dict) -> trainer.TrainConfig:
    doc = dict(doc)
    if args.seed is not None:
        doc["seed"] = args.seed
    if args.deterministic:
        doc["deterministic"] = True
    if getattr(args, "dataset", None):
        doc["dataset"] = args.dataset
    if args.out:
        doc["out"] = args.out
    for key in ("epochs", "max_steps", "lr", "batch_size"):
        v = getattr(args, key, None)
        if v is not None:
            doc[key] = v
    return trainer.TrainConfig.from_dict(doc)


def cmd_generate(args) -> int:
    cfg = _gen_config(args, _load_json(args.config))
    if not args.out:
        raise UsageError("generate needs --out <dir>")
    man = panosim.generate_dataset(cfg, args.out)
    counts = {s: len(man.split(s)) for s in ("train", "val", "test")}
    print(f"wrote {len(man.records)} frames to {args.out} ({counts})")
    return EXIT_OK


def cmd_validate(args) -> int:
    path = Path(args.dataset)
    if path.is_dir():
        path = path / "manifest.jsonl"
    report = dataio.validate_dataset(path)
    print(report.summary())
    return EXIT_OK if report.passed else EXIT_FAIL


def cmd_train(args) -> int:
    cfg = _train_config(args, _load_json(args.config))
    if not cfg.dataset:
        raise UsageError("train needs a dataset (positional argument or 'dataset' in --config)")
    res = trainer.train(cfg)
    last = res.history[-1] if res.history else None
    print(f"{len(res.history)} steps; log {res.log_path}; checkpoints: {[str(c) for c in res.checkpoints]}")
    if last:
        print(f"final L_Total={last['L_Total']:.5f} L_Depth={last['L_Depth']:.5f} L_Normal={last['L_Normal']:.5f}")
    return EXIT_OK


def cmd_eval(args) -> int:
    res = trainer.evaluate(args.checkpoint, args.dataset, args.split)
    res.metadata["checkpoint"] = str(args.checkpoint)
    print(res.table(label=res.metadata["model"]))
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(res.to_json() + "\n")
        (out / "report.txt").write_text(res.table(label=res.metadata["model"]) + "\n")
    return EXIT_OK


def cmd_ablate(args) -> int:
    doc = _load_json(args.config)
    gen = _gen_config(args, doc.get("generate", {}))
    tdoc = dict(doc.get("train", {}))
    tcfg = _train_config(argparse.Namespace(seed=args.seed, deterministic=args.deterministic, out=None), tdoc)
    if not args.out:
        raise UsageError("ablate needs --out <dir>")
    res = trainer.ablation_run(gen, tcfg, args.out)
    print(res.table())
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    results = checks.run_block_checks(seed=args.seed or 0)
    if not args.blocks_only:
        results.append(checks.run_model_check(seed=args.seed or 0, max_coords=args.max_coords))
    for r in results:
        print(r.line())
    return EXIT_OK if all(r.passed for r in results) else EXIT_FAIL


def cmd_params(args) -> int:
    doc = _load_json(args.config)
    if doc:
        cfg = ModelConfig.from_dict(doc)
    elif args.full_scale:
        cfg = ModelConfig.full_scale(args.variant)
    else:
        cfg = ModelConfig.desk(args.variant)
    if args.describe:
        print(describe(cfg))
    else:
        print(f"{cfg.variant}: {count_parameters(cfg):,} parameters")
    return EXIT_OK


def cmd_augpreview(args) -> int:
    if not args.out:
        raise UsageError("augpreview needs --out <dir>")
    root = Path(args.dataset)
    man = dataio.read_manifest(root / "manifest.jsonl")
    aug = AugmentationConfig(**_load_json(args.config)) if args.config else AugmentationConfig()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    seed = args.seed or 0
    for i, rec in enumerate(man.records[: args.count]):
        s = dataio.load_sample(root, rec, stereo=man.stereo)
        for k in range(args.variants):
            a = augment(s, aug, [seed, k, i])
            dataio.write_color_png(out / f"{rec.frame_id}_aug{k}.png", a.color)
            depth_vis = np.clip(a.depth / man.d_max, 0, 1)
            dataio.write_color_png(out / f"{rec.frame_id}_aug{k}_depth.png", np.repeat(depth_vis[..., None], 3, -1))
    print(f"wrote previews for {min(args.count, len(man.records))} frames to {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON configuration document")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--deterministic", action="store_true", help="single-stream, in-order execution")
    common.add_argument("--out", help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="omnikit", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", parents=[common], help="render a synthetic dataset")
    g.add_argument("--variant", choices=panosim.VARIANTS)
    g.add_argument("--frames-per-path", dest="frames_per_path", type=int)
    g.add_argument("--train-paths", dest="train_paths", type=int)
    g.add_argument("--scenes", type=int)
    g.add_argument("--height", type=int)
    g.add_argument("--d-max", dest="d_max", type=float)
    g.add_argument("--stereo", action="store_true")
    g.set_defaults(fn=cmd_generate)

    v = sub.add_parser("validate", parents=[common], help="check a dataset's structural invariants")
    v.add_argument("dataset", help="dataset directory or manifest.jsonl")
    v.set_defaults(fn=cmd_validate)

    t = sub.add_parser("train", parents=[common], help="train a model")
    t.add_argument("dataset", nargs="?")
    t.add_argument("--epochs", type=int)
    t.add_argument("--max-steps", dest="max_steps", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--batch-size", dest="batch_size", type=int)
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint on a dataset split")
    e.add_argument("checkpoint")
    e.add_argument("dataset")
    e.add_argument("--split", default="test", choices=("train", "val", "test"))
    e.set_defaults(fn=cmd_eval)

    a = sub.add_parser("ablate", parents=[common], help="Static / +VP / +DL comparison")
    a.set_defaults(fn=cmd_ablate)

    gc = sub.add_parser("gradcheck", parents=[common], help="finite-difference checks of every block")
    gc.add_argument("--blocks-only", action="store_true")
    gc.add_argument("--max-coords", type=int, default=24, help="sampled coordinates per tensor for the full model")
    gc.set_defaults(fn=cmd_gradcheck)

    pa = sub.add_parser("params", parents=[common], help="parameter counts and layer table")
    pa.add_argument("--variant", default="ubotnet", choices=("ubotnet", "ubotnet_lite", "unet128"))
    pa.add_argument("--full-scale", action="store_true")
    pa.add_argument("--describe", action="store_true")
    pa.set_defaults(fn=cmd_params)

    ap = sub.add_parser("augpreview", parents=[common], help="write augmented sample images")
    ap.add_argument("dataset")
    ap.add_argument("--count", type=int, default=2)
    ap.add_argument("--variants", type=int, default=3)
    ap.set_defaults(fn=cmd_augpreview)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_USAGE if e.code not in (0, None) else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.fn(args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (ValueError, TypeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
