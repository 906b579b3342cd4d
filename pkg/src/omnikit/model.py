"""UBotNet, UBotNet-Lite and UNet-128: layer recipes, parameters and forward pass.

A model is a U-Net over a ``levels``-deep channel ladder ``base * 2**i``.
UBotNet adds bottleneck-transformer blocks (1x1 reduce, relative-position
MHSA, 1x1 expand, residual) at the lowest resolution; the Lite variant swaps
every 3x3 encoder/decoder convolution for a separable one; UNet-128 has no
attention.  Two per-pixel heads (1x1 layers, sigmoid) predict depth and normals.
"""

from __future__ import annotations

import io
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Tensor

VARIANTS = ("ubotnet", "ubotnet_lite", "unet128")
CHECKPOINT_MAGIC = b"OHKPT1"


@dataclass
class ModelConfig:
    variant: str = "ubotnet"
    base_channels: int = 8
    levels: int = 3
    bot_blocks: int = 1
    heads: int = 4
    height: int = 32
    width: int = 64
    head_hidden_width: int | None = None
    bot_width: int | None = None
    norm_groups: int = 8
    kernel_size: int = 3
    seed: int = 0
    notes: str = ""

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.levels < 2:
            raise ValueError("need at least two levels")
        if self.width != 2 * self.height:
            raise ValueError(f"input must be 2:1, got {self.width}x{self.height}")
        step = 2 ** (self.levels - 1)
        if self.height % step:
            raise ValueError(f"height {self.height} not divisible by 2^(levels-1) = {step}")
        if self.base_channels % self.norm_groups:
            raise ValueError(f"base channels {self.base_channels} not divisible by {self.norm_groups} groups")
        if self.has_attention:
            if not 1 <= self.bot_blocks <= 3:
                raise ValueError(f"bot_blocks must be in 1..3, got {self.bot_blocks}")
            bw = self.attention_width
            if bw % self.heads or bw % self.norm_groups:
                raise ValueError(f"attention width {bw} incompatible with {self.heads} heads / {self.norm_groups} groups")

    @property
    def has_attention(self) -> bool:
        return self.variant != "unet128"

    @property
    def separable(self) -> bool:
        return self.variant == "ubotnet_lite"

    @property
    def channels(self) -> list[int]:
        return [self.base_channels * 2**i for i in range(self.levels)]

    @property
    def attention_width(self) -> int:
        return self.bot_width or self.channels[-1] // 2

    @property
    def hidden_width(self) -> int:
        return self.head_hidden_width or self.base_channels

    @property
    def bottleneck_hw(self) -> tuple[int, int]:
        step = 2 ** (self.levels - 1)
        return self.height // step, self.width // step

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)

    @classmethod
    def desk(cls, variant: str = "ubotnet", height: int = 32, **kw) -> "ModelConfig":
        return cls(variant=variant, base_channels=8, levels=3, height=height, width=2 * height, **kw)

    @classmethod
    def full_scale(cls, variant: str = "ubotnet") -> "ModelConfig":
        # 128..2048 ladder; three BoT blocks at 1024-wide attention
        return cls(
            variant=variant,
            base_channels=128,
            levels=5,
            bot_blocks=3,
            heads=4,
            height=256,
            width=512,
            bot_width=1024,
            notes="full scale: base 128, 5 levels (128..2048), 3 BoT blocks, attention width 1024, 4 heads",
        )


@dataclass
class LayerSpec:
    name: str
    kind: str  # conv | sepconv | norm | mhsa | fc
    params: dict  # param name -> shape

    @property
    def count(self) -> int:
        return sum(math.prod(s) for s in self.params.values())


def _conv_spec(name, cin, cout, k, separable=False) -> LayerSpec:
    if separable and k > 1:
        return LayerSpec(name, "sepconv", {"depthwise": (cin, 1, k, k), "pointwise": (cout, cin, 1, 1), "bias": (cout,)})
    return LayerSpec(name, "conv", {"weight": (cout, cin, k, k), "bias": (cout,)})


def _norm_spec(name, c) -> LayerSpec:
    return LayerSpec(name, "norm", {"gamma": (c,), "beta": (c,)})


def layer_specs(cfg: ModelConfig) -> list[LayerSpec]:
    k = cfg.kernel_size
    ch = cfg.channels
    specs: list[LayerSpec] = []
    cin = 3
    for i, c in enumerate(ch):
        specs += [
            _conv_spec(f"enc{i}.conv1", cin, c, k, cfg.separable),
            _norm_spec(f"enc{i}.norm1", c),
            _conv_spec(f"enc{i}.conv2", c, c, k, cfg.separable),
            _norm_spec(f"enc{i}.norm2", c),
        ]
        cin = c
    if cfg.has_attention:
        top, aw = ch[-1], cfg.attention_width
        hb, wb = cfg.bottleneck_hw
        d = aw // cfg.heads
        for j in range(cfg.bot_blocks):
            specs += [
                _conv_spec(f"bot{j}.reduce", top, aw, 1),
                _norm_spec(f"bot{j}.norm1", aw),
                LayerSpec(
                    f"bot{j}.mhsa",
                    "mhsa",
                    {
                        "wq": (aw, aw),
                        "wk": (aw, aw),
                        "wv": (aw, aw),
                        "wo": (aw, aw),
                        "rel_h": (2 * hb - 1, d),
                        "rel_w": (2 * wb - 1, d),
                    },
                ),
                _norm_spec(f"bot{j}.norm2", aw),
                _conv_spec(f"bot{j}.expand", aw, top, 1),
                _norm_spec(f"bot{j}.norm3", top),
            ]
    for i in reversed(range(cfg.levels - 1)):
        c = ch[i]
        specs += [
            _conv_spec(f"dec{i}.conv1", ch[i + 1] + c, c, k, cfg.separable),
            _norm_spec(f"dec{i}.norm1", c),
            _conv_spec(f"dec{i}.conv2", c, c, k, cfg.separable),
            _norm_spec(f"dec{i}.norm2", c),
        ]
    hw = cfg.hidden_width
    for head, out in (("depth", 1), ("normal", 3)):
        specs += [
            LayerSpec(f"head_{head}.fc1", "fc", {"weight": (hw, ch[0], 1, 1), "bias": (hw,)}),
            LayerSpec(f"head_{head}.fc2", "fc", {"weight": (out, hw, 1, 1), "bias": (out,)}),
        ]
    return specs


def count_parameters(cfg: ModelConfig) -> int:
    """Exact number of learnable scalars, without allocating them."""
    return sum(s.count for s in layer_specs(cfg))


def describe(cfg: ModelConfig) -> str:
    """One row per parameterized layer plus the total."""
    specs = layer_specs(cfg)
    lines = [f"# variant={cfg.variant} base={cfg.base_channels} levels={cfg.levels} "
             f"bot_blocks={cfg.bot_blocks if cfg.has_attention else 0} heads={cfg.heads} "
             f"input={cfg.width}x{cfg.height}"]
    if cfg.notes:
        lines.append(f"# {cfg.notes}")
    name_w = max(len(s.name) for s in specs)
    for s in specs:
        shapes = " ".join(f"{p}{list(shape)}" for p, shape in s.params.items())
        lines.append(f"{s.name:<{name_w}}  {s.kind:<7}  {s.count:>12,d}  {shapes}")
    lines.append(f"{'total':<{name_w}}  {'':<7}  {sum(s.count for s in specs):>12,d}")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# Realized model
# ---------------------------------------------------------------------------


@dataclass
class Model:
    config: ModelConfig
    layers: list[LayerSpec]
    params: dict[str, Tensor] = field(default_factory=dict)

    def parameters(self) -> dict[str, Tensor]:
        return self.params

    def p(self, name: str) -> Tensor:
        return self.params[name]

    def layer_table(self) -> list[tuple[str, int]]:
        return [(s.name, sum(self.params[f"{s.name}.{k}"].size for k in s.params)) for s in self.layers]

    def num_parameters(self) -> int:
        return sum(t.size for t in self.params.values())

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None


def _init(spec: LayerSpec, pname: str, shape: tuple, rng: np.random.Generator) -> np.ndarray:
    if pname in ("bias", "beta") or pname.startswith("rel_"):
        return np.zeros(shape)
    if pname == "gamma":
        return np.ones(shape)
    if spec.kind == "mhsa":
        return rng.normal(0.0, 1.0 / math.sqrt(shape[1]), size=shape)
    fan_in = math.prod(shape[1:])
    return rng.normal(0.0, math.sqrt(2.0 / fan_in), size=shape)


def build(cfg: ModelConfig) -> Model:
    rng = np.random.default_rng(cfg.seed)
    specs = layer_specs(cfg)
    params = {}
    for s in specs:
        for pname, shape in s.params.items():
            params[f"{s.name}.{pname}"] = Tensor(_init(s, pname, shape, rng), requires_grad=True)
    return Model(cfg, specs, params)


@dataclass
class Prediction:
    depth01: Tensor  # B x 1 x H x W
    normal01: Tensor  # B x 3 x H x W


def _conv(m: Model, name: str, x: Tensor) -> Tensor:
    spec_kind = "sepconv" if f"{name}.depthwise" in m.params else "conv"
    if spec_kind == "sepconv":
        return nn.separable_conv2d(
            x, nn.SeparableConv2dParams(m.p(f"{name}.depthwise"), m.p(f"{name}.pointwise"), m.p(f"{name}.bias"))
        )
    return nn.conv2d(x, nn.Conv2dParams(m.p(f"{name}.weight"), m.p(f"{name}.bias")))


def _norm(m: Model, name: str, x: Tensor) -> Tensor:
    return nn.group_norm(x, m.p(f"{name}.gamma"), m.p(f"{name}.beta"), m.config.norm_groups)


def _double_conv(m: Model, prefix: str, x: Tensor) -> Tensor:
    x = ad.relu(_norm(m, f"{prefix}.norm1", _conv(m, f"{prefix}.conv1", x)))
    return ad.relu(_norm(m, f"{prefix}.norm2", _conv(m, f"{prefix}.conv2", x)))


def _bot_block(m: Model, prefix: str, x: Tensor) -> Tensor:
    h = ad.relu(_norm(m, f"{prefix}.norm1", _conv(m, f"{prefix}.reduce", x)))
    mp = nn.MhsaParams(
        *(m.p(f"{prefix}.mhsa.{k}") for k in ("wq", "wk", "wv", "wo", "rel_h", "rel_w")), heads=m.config.heads
    )
    h = ad.relu(_norm(m, f"{prefix}.norm2", nn.mhsa2d(h, mp)))
    h = _norm(m, f"{prefix}.norm3", _conv(m, f"{prefix}.expand", h))
    return ad.relu(x + h)


def _head(m: Model, name: str, x: Tensor) -> Tensor:
    h = ad.relu(_conv(m, f"{name}.fc1", x))
    return ad.sigmoid(_conv(m, f"{name}.fc2", h))


def forward(m: Model, x) -> Prediction:
    cfg = m.config
    x = ad.as_tensor(x)
    if x.ndim != 4 or x.shape[1:] != (3, cfg.height, cfg.width):
        raise ValueError(f"expected input B x 3 x {cfg.height} x {cfg.width}, got {x.shape}")
    skips = []
    h = x
    for i in range(cfg.levels):
        h = _double_conv(m, f"enc{i}", h)
        if i < cfg.levels - 1:
            skips.append(h)
            h = nn.aa_maxpool(h)
    if cfg.has_attention:
        for j in range(cfg.bot_blocks):
            h = _bot_block(m, f"bot{j}", h)
    for i in reversed(range(cfg.levels - 1)):
        h = ad.concat([nn.bilinear_upsample2x(h), skips[i]], axis=1)
        h = _double_conv(m, f"dec{i}", h)
    return Prediction(_head(m, "head_depth", h), _head(m, "head_normal", h))


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(m: Model, path, extra: dict | None = None) -> None:
    """Write ``OHKPT1`` container: text header then little-endian float32 payload.

    Header lines: ``config <json>``, ``meta <json>``, ``tensors <N>``, then one
    ``name dtype d0,d1,.. offset nbytes`` line per array, then ``end``.
    Offsets are relative to the first payload byte.
    """
    header = [CHECKPOINT_MAGIC.decode(), "config " + json.dumps(m.config.to_dict(), sort_keys=True),
              "meta " + json.dumps(extra or {}, sort_keys=True), f"tensors {len(m.params)}"]
    payload = io.BytesIO()
    for name, t in m.params.items():
        arr = np.ascontiguousarray(t.data, dtype="<f4")
        shape = ",".join(str(s) for s in arr.shape)
        header.append(f"{name} <f4 {shape} {payload.tell()} {arr.nbytes}")
        payload.write(arr.tobytes())
    header.append("end")
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("utf-8"))
        fh.write(payload.getvalue())


def read_checkpoint(path) -> tuple[ModelConfig, dict[str, np.ndarray], dict]:
    with open(path, "rb") as fh:
        blob = fh.read()
    lines = []
    pos = 0
    while True:
        nl = blob.find(b"\n", pos)
        if nl < 0:
            raise ValueError(f"{path}: truncated checkpoint header")
        line = blob[pos:nl].decode("utf-8")
        pos = nl + 1
        lines.append(line)
        if line == "end":
            break
    if lines[0] != CHECKPOINT_MAGIC.decode():
        raise ValueError(f"{path}: not an OHKPT1 checkpoint")
    cfg = ModelConfig.from_dict(json.loads(lines[1].split(" ", 1)[1]))
    meta = json.loads(lines[2].split(" ", 1)[1])
    n = int(lines[3].split()[1])
    arrays = {}
    for line in lines[4 : 4 + n]:
        name, dtype, shape, off, nbytes = line.split(" ")
        shape = tuple(int(s) for s in shape.split(",")) if shape else ()
        off, nbytes = int(off), int(nbytes)
        if pos + off + nbytes > len(blob):
            raise ValueError(f"{path}: payload for {name} is truncated")
        arrays[name] = np.frombuffer(blob, dtype=dtype, count=math.prod(shape), offset=pos + off).reshape(shape).copy()
    return cfg, arrays, meta


def load_checkpoint(path) -> Model:
    cfg, arrays, meta = read_checkpoint(path)
    m = build(cfg)
    if set(arrays) != set(m.params):
        raise ValueError(f"{path}: parameter names do not match the {cfg.variant} recipe")
    for name, arr in arrays.items():
        if arr.shape != m.params[name].shape:
            raise ValueError(f"{path}: {name} has shape {arr.shape}, expected {m.params[name].shape}")
        m.params[name] = Tensor(arr, requires_grad=True)
    return m
