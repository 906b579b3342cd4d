"""Training losses and the depth / normal evaluation metrics.

Losses operate on tape tensors; metrics operate on numpy arrays and use
exactly-rounded sums so that they do not depend on pixel order.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, fields

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

DEPTH_EPS = 1e-3
NORMAL_THRESHOLDS = (5.0, 7.5, 11.25)
DELTA_BASE = 1.25


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------


def _mask_array(mask, like: Tensor) -> np.ndarray:
    m = np.broadcast_to(np.asarray(mask, dtype=bool), like.shape)
    if not m.any():
        raise ValueError("loss mask selects no pixels")
    return m


def berhu(pred01: Tensor, gt01, mask=None, c: float | None = None) -> Tensor:
    """Reverse Huber over masked pixels, threshold 0.2 * max|residual| unless ``c`` is given."""
    gt = ad.as_tensor(gt01)
    m = _mask_array(True if mask is None else mask, pred01)
    mf = m.astype(pred01.dtype)
    n = float(m.sum())
    r = ad.abs_(pred01 - gt) * mf
    if c is None:
        if float(r.data.max()) == 0.0:
            return ad.sum_(r) * 0.0
        cc = ad.scale(ad.amax(r), 0.2)
        lin = (r.data <= cc.data).astype(pred01.dtype)
        quad = (r * r + cc * cc) / ad.scale(cc, 2.0)
    else:
        if c <= 0:
            raise ValueError("berhu threshold must be positive")
        lin = (r.data <= c).astype(pred01.dtype)
        quad = ad.scale(r * r, 1.0 / (2 * c)) + c / 2
    per_pixel = r * lin + quad * ((1.0 - lin) * mf)
    return ad.scale(ad.sum_(per_pixel), 1.0 / n)


def l1_normal(pred01: Tensor, gt01, normal_valid) -> Tensor:
    """Mean absolute difference over valid pixels and the three channels.

    ``normal_valid`` is B x H x W (or broadcastable to the channel-first maps).
    """
    valid = np.asarray(normal_valid, dtype=bool)
    if valid.ndim == pred01.ndim - 1:
        valid = valid[:, None]
    m = _mask_array(valid, pred01)
    diff = ad.abs_(pred01 - ad.as_tensor(gt01)) * m.astype(pred01.dtype)
    return ad.scale(ad.sum_(diff), 1.0 / float(m.sum()))


@dataclass
class LossTerms:
    total: Tensor
    depth: Tensor
    normal: Tensor


def total_loss(pred, target, masks=None) -> LossTerms:
    """Unweighted sum of the depth (berHu) and normal (L1) objectives.

    ``pred`` has ``depth01``/``normal01`` tensors; ``target`` carries
    ``depth01``, ``normal01`` and ``normal_valid`` arrays.  Depth is supervised
    on every pixel.
    """
    depth_mask = None if masks is None else masks.get("depth")
    normal_valid = target["normal_valid"] if masks is None else masks["normal"]
    ld = berhu(pred.depth01, target["depth01"], depth_mask)
    ln = l1_normal(pred.normal01, target["normal01"], normal_valid)
    return LossTerms(ld + ln, ld, ln)


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------


@dataclass
class MetricReport:
    rmse: float = 0.0
    mre: float = 0.0
    rmse_log: float = 0.0
    delta1: float = 0.0
    delta2: float = 0.0
    delta3: float = 0.0
    mean_deg: float = 0.0
    median_deg: float = 0.0
    rmse_deg: float = 0.0
    acc5: float = 0.0
    acc7_5: float = 0.0
    acc11_25: float = 0.0

    COLUMNS = (
        ("rmse", "RMSE"),
        ("mre", "MRE"),
        ("rmse_log", "RMSE log"),
        ("delta1", "d1<1.25"),
        ("delta2", "d2<1.25^2"),
        ("delta3", "d3<1.25^3"),
        ("mean_deg", "Mean"),
        ("median_deg", "Median"),
        ("rmse_deg", "RMSE"),
        ("acc5", "5.0°"),
        ("acc7_5", "7.5°"),
        ("acc11_25", "11.25°"),
    )

    def as_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def row(self) -> list[str]:
        """Table cells; angular accuracies as percent."""
        out = []
        for key, _ in self.COLUMNS:
            v = getattr(self, key)
            out.append(f"{100 * v:.2f}" if key.startswith("acc") else (f"{v:.2f}" if key.endswith("deg") else f"{v:.3f}"))
        return out

    @classmethod
    def mean_of(cls, reports: list["MetricReport"]) -> "MetricReport":
        if not reports:
            raise ValueError("no reports to aggregate")
        return cls(**{f.name: _fmean([getattr(r, f.name) for r in reports]) for f in fields(cls)})


def _fmean(values) -> float:
    values = np.asarray(values, dtype=np.float64).ravel()
    return math.fsum(values.tolist()) / values.size


def depth_metrics(pred01, gt01, depth_valid=None, eps: float = DEPTH_EPS) -> dict:
    """RMSE, MRE, RMSE-log and delta accuracies in normalized depth units.

    Pixels need ``gt >= eps``.  The log error uses pixels where both values are
    ``>= eps``; predictions below ``eps`` count as delta failures.
    """
    p = np.asarray(pred01, dtype=np.float64).ravel()
    g = np.asarray(gt01, dtype=np.float64).ravel()
    m = g >= eps
    if depth_valid is not None:
        m &= np.asarray(depth_valid, dtype=bool).ravel()
    if not m.any():
        raise ValueError("depth metrics: no valid pixels")
    p, g = p[m], g[m]
    both = p >= eps
    out = {
        "rmse": math.sqrt(_fmean((p - g) ** 2)),
        "mre": _fmean(np.abs(p - g) / g),
        "rmse_log": math.sqrt(_fmean((np.log(p[both]) - np.log(g[both])) ** 2)) if both.any() else float("inf"),
    }
    ratio = np.full(p.shape, np.inf)
    ratio[both] = np.maximum(p[both] / g[both], g[both] / p[both])
    for k in (1, 2, 3):
        out[f"delta{k}"] = _fmean(ratio < DELTA_BASE**k)
    return out


def decode_normals(v01) -> np.ndarray:
    """(n + 1) / 2 encoding back to unit vectors; zero-length stays zero."""
    n = 2.0 * np.asarray(v01, dtype=np.float64) - 1.0
    norm = np.linalg.norm(n, axis=-1, keepdims=True)
    return np.divide(n, norm, out=np.zeros_like(n), where=norm > 1e-12)


def angular_error_deg(pred_unit: np.ndarray, gt_unit: np.ndarray) -> np.ndarray:
    dot = np.clip(np.sum(pred_unit * gt_unit, axis=-1), -1.0, 1.0)
    err = np.degrees(np.arccos(dot))
    zero = ~np.any(pred_unit != 0, axis=-1)
    return np.where(zero, 90.0, err)


def normal_metrics(pred01, gt01, normal_valid) -> dict:
    """Angular error statistics over valid pixels; maps are H x W x 3 (channels last)."""
    valid = np.asarray(normal_valid, dtype=bool)
    if not valid.any():
        raise ValueError("normal metrics: no valid pixels")
    err = angular_error_deg(decode_normals(pred01)[valid], decode_normals(gt01)[valid])
    out = {
        "mean_deg": _fmean(err),
        "median_deg": float(np.median(err)),
        "rmse_deg": math.sqrt(_fmean(err**2)),
    }
    for key, thr in zip(("acc5", "acc7_5", "acc11_25"), NORMAL_THRESHOLDS):
        out[key] = _fmean(err < thr)
    return out


def image_report(depth_pred01, depth_gt01, normal_pred01, normal_gt01, normal_valid, depth_valid=None) -> MetricReport:
    """Metrics for one image (depth H x W, normals H x W x 3)."""
    return MetricReport(
        **depth_metrics(depth_pred01, depth_gt01, depth_valid),
        **normal_metrics(normal_pred01, normal_gt01, normal_valid),
    )


def format_table(rows: dict[str, MetricReport], label: str = "Method") -> str:
    """Aligned text table with the twelve metric columns."""
    header = [label] + [title for _, title in MetricReport.COLUMNS]
    body = [[name] + rep.row() for name, rep in rows.items()]
    widths = [max(len(r[i]) for r in [header] + body) for i in range(len(header))]
    lines = ["  ".join(c.rjust(w) for c, w in zip(r, widths)) for r in [header] + body]
    return "\n".join(lines)


def report_json(report: MetricReport, **metadata) -> str:
    payload = {"metrics": report.as_dict(), **metadata}
    return json.dumps(payload, indent=2, sort_keys=True)
