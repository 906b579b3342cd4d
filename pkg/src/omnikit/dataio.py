"""On-disk dataset format: PFM float maps, 8-bit PNG color, JSONL manifests.

Layout::

    root/manifest.jsonl      header line, then one record per frame
    root/color/<id>.png      RGB, 8 bit
    root/depth/<id>.pfm      metric depth, 1 channel
    root/normal/<id>.pfm     world-space normal components in [-1, 1], zero = invalid

Stereo datasets store every map as a top-bottom pack (reference eye on top).
"""

from __future__ import annotations

import json
import os
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .equirect import PanoSample

FORMAT_VERSION = 1
SPLITS = ("train", "val", "test")


class FormatError(ValueError):
    """Malformed or unsupported file content."""


# ---------------------------------------------------------------------------
# PFM
# ---------------------------------------------------------------------------

_PFM_HEADER = re.compile(rb"^(PF|Pf)\n(\d+) (\d+)\n(\S+)\n")


def write_pfm(path, image: np.ndarray) -> None:
    """Little-endian PFM (scale -1.0), rows stored bottom to top."""
    img = np.asarray(image)
    if img.ndim == 3 and img.shape[2] == 1:
        img = img[..., 0]
    if img.ndim == 2:
        tag = b"Pf"
    elif img.ndim == 3 and img.shape[2] == 3:
        tag = b"PF"
    else:
        raise ValueError(f"PFM holds 1- or 3-channel maps, got shape {img.shape}")
    if not np.all(np.isfinite(img)):
        raise ValueError("refusing to write non-finite values to PFM")
    h, w = img.shape[:2]
    body = np.ascontiguousarray(np.flipud(img), dtype="<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(tag + b"\n" + f"{w} {h}\n".encode() + b"-1.0\n" + body)


def read_pfm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    m = _PFM_HEADER.match(blob)
    if m is None:
        raise FormatError(f"{path}: malformed PFM header")
    tag, w, h, scale = m.group(1), int(m.group(2)), int(m.group(3)), m.group(4)
    try:
        scale = float(scale)
    except ValueError:
        raise FormatError(f"{path}: bad PFM scale {scale!r}") from None
    if scale >= 0:
        raise FormatError(f"{path}: big-endian PFM (scale {scale}) is not supported")
    channels = 3 if tag == b"PF" else 1
    expected = w * h * channels * 4
    payload = blob[m.end() :]
    if len(payload) != expected:
        raise FormatError(f"{path}: payload has {len(payload)} bytes, expected {expected}")
    arr = np.frombuffer(payload, dtype="<f4").reshape((h, w, channels) if channels == 3 else (h, w))
    return np.flipud(arr).astype(np.float32)


# ---------------------------------------------------------------------------
# PNG color
# ---------------------------------------------------------------------------


def write_color_png(path, color: np.ndarray) -> None:
    c = np.asarray(color)
    if c.ndim != 3 or c.shape[2] != 3:
        raise ValueError(f"color must be H x W x 3, got {c.shape}")
    q = np.round(np.clip(c, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(q, mode="RGB").save(path, format="PNG", optimize=False)


def read_color_png(path) -> np.ndarray:
    with Image.open(path) as im:
        if im.mode != "RGB":
            raise FormatError(f"{path}: expected 8-bit RGB PNG, got mode {im.mode}")
        return np.asarray(im, dtype=np.float32) / 255.0


# ---------------------------------------------------------------------------
# Top-bottom packing
# ---------------------------------------------------------------------------


def pack_topbottom(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.shape != b.shape:
        raise ValueError(f"stereo halves differ in shape: {a.shape} vs {b.shape}")
    return np.concatenate([a, b], axis=0)


def unpack_topbottom(stacked: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    h2 = stacked.shape[0]
    if h2 % 2:
        raise ValueError(f"stacked height {h2} is odd")
    return stacked[: h2 // 2], stacked[h2 // 2 :]


# ---------------------------------------------------------------------------
# Manifest
# ---------------------------------------------------------------------------


@dataclass
class SampleRecord:
    frame_id: str
    color: str
    depth: str
    normal: str
    position: list
    yaw: float
    t: float
    variant: str
    split: str
    path_id: str = ""
    frame: int = 0


@dataclass
class DatasetManifest:
    width: int
    height: int
    d_max: float
    seed: int
    records: list = field(default_factory=list)
    stereo: bool = False
    variant: str = ""
    format_version: int = FORMAT_VERSION
    test_path: str = ""
    generator: dict = field(default_factory=dict)

    def header(self) -> dict:
        d = asdict(self)
        d.pop("records")
        return d

    def split(self, name: str) -> list[SampleRecord]:
        return [r for r in self.records if r.split == name]


def write_manifest(root, manifest: DatasetManifest) -> Path:
    path = Path(root) / "manifest.jsonl"
    lines = [json.dumps(manifest.header(), sort_keys=True)]
    lines += [json.dumps(asdict(r), sort_keys=True) for r in manifest.records]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def read_manifest(path) -> DatasetManifest:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.jsonl"
    lines = [ln for ln in path.read_text(encoding="utf-8").splitlines() if ln.strip()]
    if not lines:
        raise FormatError(f"{path}: empty manifest")
    try:
        header = json.loads(lines[0])
        records = [SampleRecord(**json.loads(ln)) for ln in lines[1:]]
    except (json.JSONDecodeError, TypeError) as e:
        raise FormatError(f"{path}: {e}") from None
    if header.get("format_version") != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported format version {header.get('format_version')}")
    return DatasetManifest(records=records, **header)


# ---------------------------------------------------------------------------
# Samples
# ---------------------------------------------------------------------------


def sample_paths(frame_id: str) -> dict:
    return {
        "color": f"color/{frame_id}.png",
        "depth": f"depth/{frame_id}.pfm",
        "normal": f"normal/{frame_id}.pfm",
    }


def write_sample(root, record: SampleRecord, sample: PanoSample, second: PanoSample | None = None) -> None:
    root = Path(root)
    for sub in ("color", "depth", "normal"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    color, depth, normal = sample.color, sample.depth, sample.normal
    if second is not None:
        color = pack_topbottom(color, second.color)
        depth = pack_topbottom(depth, second.depth)
        normal = pack_topbottom(normal, second.normal)
    write_color_png(root / record.color, color)
    write_pfm(root / record.depth, depth)
    write_pfm(root / record.normal, normal)


def load_sample(root, record: SampleRecord, stereo: bool = False, eye: str = "top") -> PanoSample:
    root = Path(root)
    color = read_color_png(root / record.color)
    depth = read_pfm(root / record.depth)
    normal = read_pfm(root / record.normal)
    if stereo:
        pick = 0 if eye == "top" else 1
        color, depth, normal = (unpack_topbottom(a)[pick] for a in (color, depth, normal))
    meta = {"frame_id": record.frame_id, "yaw": record.yaw, "t": record.t, "variant": record.variant}
    return PanoSample(color=color, depth=depth, normal=normal, metadata=meta)


def training_arrays(sample: PanoSample, d_max: float) -> dict:
    """Channel-first network inputs/targets from a metric sample."""
    return {
        "color": np.transpose(sample.color, (2, 0, 1)),
        "depth01": (sample.depth / d_max)[None],
        "normal01": np.transpose((sample.normal + 1.0) / 2.0, (2, 0, 1)),
        "normal_valid": sample.normal_valid,
    }


# ---------------------------------------------------------------------------
# Validation
# ---------------------------------------------------------------------------


@dataclass
class Violation:
    frame_id: str
    check: str
    detail: str


@dataclass
class ValidationReport:
    checked: int
    violations: list

    @property
    def passed(self) -> bool:
        return not self.violations

    def summary(self) -> str:
        lines = [f"checked {self.checked} samples, {len(self.violations)} violation(s)"]
        lines += [f"  {v.frame_id}: [{v.check}] {v.detail}" for v in self.violations]
        return "\n".join(lines)


def _check_sample(root: Path, rec: SampleRecord, man: DatasetManifest, unit_tol: float) -> list[Violation]:
    out = []

    def bad(check, detail):
        out.append(Violation(rec.frame_id, check, detail))

    if not rec.color.endswith(".png") or not rec.depth.endswith(".pfm") or not rec.normal.endswith(".pfm"):
        bad("carrier", "color must be PNG and depth/normal PFM")
        return out
    missing = [p for p in (rec.color, rec.depth, rec.normal) if not (root / p).is_file()]
    if missing:
        bad("missing_file", ", ".join(missing))
        return out
    try:
        color = read_color_png(root / rec.color)
        depth = read_pfm(root / rec.depth)
        normal = read_pfm(root / rec.normal)
    except (FormatError, OSError) as e:
        bad("format", str(e))
        return out
    if depth.ndim != 2 or normal.ndim != 3 or color.ndim != 3:
        bad("channels", f"depth {depth.shape}, normal {normal.shape}, color {color.shape}")
        return out
    if man.stereo:
        if depth.shape[0] % 2:
            bad("aspect", f"stereo pack height {depth.shape[0]} is odd")
            return out
        color, depth, normal = (unpack_topbottom(a)[0] for a in (color, depth, normal))
    h, w = depth.shape
    if w != 2 * h or (w, h) != (man.width, man.height):
        bad("aspect", f"depth is {w}x{h}, manifest says {man.width}x{man.height} (2:1 required)")
    if color.shape[:2] != depth.shape or normal.shape[:2] != depth.shape:
        bad("extent", f"color {color.shape[:2]}, depth {depth.shape}, normal {normal.shape[:2]}")
        return out
    if not np.all(np.isfinite(depth)):
        bad("depth_nan", f"{int(np.sum(~np.isfinite(depth)))} non-finite depth values")
    finite = depth[np.isfinite(depth)]
    if np.any(finite <= 0) or np.any(finite > man.d_max):
        n = int(np.sum((finite <= 0) | (finite > man.d_max)))
        bad("depth_range", f"{n} depth values outside (0, {man.d_max}]")
    if not np.all(np.isfinite(normal)):
        bad("normal_nan", "non-finite normal components")
    else:
        norm = np.linalg.norm(normal.astype(np.float64), axis=-1)
        zero = np.all(normal == 0, axis=-1)
        off = ~zero & (np.abs(norm - 1.0) > unit_tol)
        if off.any():
            bad("normal_norm", f"{int(off.sum())} normals neither unit nor zero")
    if color.min() < 0 or color.max() > 1:
        bad("color_range", "color outside [0, 1]")
    if rec.split not in SPLITS:
        bad("split", f"unknown split tag {rec.split!r}")
    return out


def validate_dataset(manifest_path, unit_tol: float = 1e-4) -> ValidationReport:
    """Itemized structural check of every sample; never raises on bad data."""
    manifest_path = Path(manifest_path)
    root = manifest_path if manifest_path.is_dir() else manifest_path.parent
    try:
        man = read_manifest(root)
    except (FormatError, OSError) as e:
        return ValidationReport(0, [Violation("<manifest>", "manifest", str(e))])
    violations = []
    if man.width != 2 * man.height:
        violations.append(Violation("<manifest>", "aspect", f"resolution {man.width}x{man.height} is not 2:1"))
    seen = set()
    path_splits: dict[str, set] = {}
    for rec in man.records:
        if rec.frame_id in seen:
            violations.append(Violation(rec.frame_id, "duplicate", "frame id repeated"))
        seen.add(rec.frame_id)
        path_splits.setdefault(rec.path_id, set()).add(rec.split)
        violations += _check_sample(root, rec, man, unit_tol)
    for rec in man.records:
        held_out = rec.path_id == man.test_path
        if (rec.split == "test") != held_out:
            violations.append(
                Violation(rec.frame_id, "split", f"split {rec.split!r} inconsistent with held-out path {man.test_path!r}")
            )
    return ValidationReport(len(man.records), violations)


def dataset_root(path) -> str:
    return os.fspath(Path(path).parent if Path(path).name == "manifest.jsonl" else Path(path))
