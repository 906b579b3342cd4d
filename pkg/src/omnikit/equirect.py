"""Equirectangular geometry, training augmentations and normal-frame changes.

World frame: +y up, +z forward, +x right.  Column ``u`` maps to longitude
``theta = 2*pi*(u + 0.5)/W - pi`` and row ``v`` to latitude
``phi = pi/2 - pi*(v + 0.5)/H``.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np
from matplotlib.colors import hsv_to_rgb, rgb_to_hsv

LUMA = np.array([0.299, 0.587, 0.114])


@dataclass
class PanoSample:
    """One equirectangular frame with metric depth and world-space normals.

    ``color`` is H x W x 3 in [0, 1]; ``depth`` H x W in (0, d_max];
    ``normal`` H x W x 3, unit length or exactly zero (sky / no surface).
    """

    color: np.ndarray
    depth: np.ndarray
    normal: np.ndarray
    metadata: dict = field(default_factory=dict)

    @property
    def height(self) -> int:
        return self.depth.shape[0]

    @property
    def width(self) -> int:
        return self.depth.shape[1]

    @property
    def normal_valid(self) -> np.ndarray:
        return np.any(self.normal != 0, axis=-1)

    def depth_valid(self, d_max: float, eps: float = 1e-3) -> np.ndarray:
        return self.depth / d_max >= eps


def _check_pixel(u, v, W, H):
    if W != 2 * H:
        raise ValueError(f"equirectangular images need W = 2H, got {W}x{H}")
    u, v = np.asarray(u), np.asarray(v)
    if np.any((u < 0) | (u >= W) | (v < 0) | (v >= H)):
        raise ValueError(f"pixel index out of range for a {W}x{H} image")
    return u, v


def pixel_to_direction(u, v, W: int, H: int) -> np.ndarray:
    """Unit view direction(s) through pixel centre(s); shape (..., 3)."""
    u, v = _check_pixel(u, v, W, H)
    theta = 2 * np.pi * (u + 0.5) / W - np.pi
    phi = np.pi / 2 - np.pi * (v + 0.5) / H
    return np.stack([np.cos(phi) * np.sin(theta), np.sin(phi), np.cos(phi) * np.cos(theta)], axis=-1)


def direction_to_pixel(d, W: int, H: int) -> tuple[np.ndarray, np.ndarray]:
    """Continuous (u, v) of direction(s); integer-valued at pixel centres."""
    d = np.asarray(d, dtype=np.float64)
    theta = np.arctan2(d[..., 0], d[..., 2])
    phi = np.arcsin(np.clip(d[..., 1], -1.0, 1.0))
    u = (theta + np.pi) * W / (2 * np.pi) - 0.5
    v = (np.pi / 2 - phi) * H / np.pi - 0.5
    return u, v


def direction_grid(H: int, W: int) -> np.ndarray:
    v, u = np.meshgrid(np.arange(H), np.arange(W), indexing="ij")
    return pixel_to_direction(u, v, W, H)


def yaw_matrix(angle: float) -> np.ndarray:
    """Rotation about +y taking camera coordinates to world coordinates."""
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


# ---------------------------------------------------------------------------
# Augmentations
# ---------------------------------------------------------------------------


@dataclass
class AugmentationConfig:
    rotation: bool = True
    shuffle_prob: float = 0.5
    jitter_prob: float = 0.5
    brightness: tuple = (0.8, 1.2)
    contrast: tuple = (0.8, 1.2)
    saturation: tuple = (0.8, 1.2)
    hue: tuple = (-0.05, 0.05)
    seed: int = 0

    def __post_init__(self):
        for name in ("brightness", "contrast", "saturation"):
            lo, hi = getattr(self, name)
            if not lo <= 1.0 <= hi:
                raise ValueError(f"{name} range {lo, hi} must contain 1")
        if not self.hue[0] <= 0.0 <= self.hue[1]:
            raise ValueError(f"hue range {self.hue} must contain 0")

    @classmethod
    def disabled(cls) -> "AugmentationConfig":
        return cls(rotation=False, shuffle_prob=0.0, jitter_prob=0.0)


def yaw_rotate_sample(sample: PanoSample, k: int) -> PanoSample:
    """Rotate the camera about the vertical axis by ``k`` whole columns.

    Maps are rolled horizontally; world-space normal vectors keep their values
    because the scene itself does not move.
    """
    W = sample.width
    if not 0 <= k < W:
        raise ValueError(f"column shift {k} outside [0, {W})")
    meta = dict(sample.metadata)
    meta["yaw"] = float((meta.get("yaw", 0.0) - 2 * np.pi * k / W) % (2 * np.pi))
    return PanoSample(
        color=np.roll(sample.color, k, axis=1),
        depth=np.roll(sample.depth, k, axis=1),
        normal=np.roll(sample.normal, k, axis=1),
        metadata=meta,
    )


def channel_shuffle(color: np.ndarray, permutation) -> np.ndarray:
    perm = tuple(int(p) for p in permutation)
    if sorted(perm) != [0, 1, 2]:
        raise ValueError(f"{permutation} is not a permutation of (0, 1, 2)")
    return color[..., list(perm)]


@dataclass(frozen=True)
class JitterFactors:
    brightness: float = 1.0
    contrast: float = 1.0
    saturation: float = 1.0
    hue: float = 0.0


def sample_jitter(cfg: AugmentationConfig, seed) -> JitterFactors:
    rng = np.random.default_rng(seed)
    return JitterFactors(
        brightness=float(rng.uniform(*cfg.brightness)),
        contrast=float(rng.uniform(*cfg.contrast)),
        saturation=float(rng.uniform(*cfg.saturation)),
        hue=float(rng.uniform(*cfg.hue)),
    )


def apply_jitter(color: np.ndarray, f: JitterFactors) -> np.ndarray:
    """Brightness, contrast, saturation, then hue rotation; clamped to [0, 1]."""
    x = np.asarray(color, dtype=np.float64) * f.brightness
    mean_luma = float((x @ LUMA).mean())
    x = f.contrast * x + (1 - f.contrast) * mean_luma
    luma = (x @ LUMA)[..., None]
    x = f.saturation * x + (1 - f.saturation) * luma
    x = np.clip(x, 0.0, 1.0)
    if f.hue != 0.0:
        hsv = rgb_to_hsv(x)
        hsv[..., 0] = (hsv[..., 0] + f.hue) % 1.0
        x = hsv_to_rgb(hsv)
    return np.clip(x, 0.0, 1.0).astype(color.dtype)


def color_jitter(color: np.ndarray, cfg: AugmentationConfig, seed) -> np.ndarray:
    return apply_jitter(color, sample_jitter(cfg, seed))


def augment(sample: PanoSample, cfg: AugmentationConfig, seed) -> PanoSample:
    """Apply the three training augmentations with a per-sample seed."""
    rng = np.random.default_rng(seed)
    out = sample
    if cfg.rotation:
        out = yaw_rotate_sample(out, int(rng.integers(0, sample.width)))
    color = out.color
    if rng.random() < cfg.shuffle_prob:
        color = channel_shuffle(color, rng.permutation(3))
    if rng.random() < cfg.jitter_prob:
        color = color_jitter(color, cfg, rng.integers(2**31))
    return dataclasses.replace(out, color=color)


# ---------------------------------------------------------------------------
# Normal frames
# ---------------------------------------------------------------------------


def world_to_view_normals(normal_map: np.ndarray, camera_rotation: np.ndarray) -> np.ndarray:
    """Express world-space normals in the camera frame (n_view = R^T n_world)."""
    R = np.asarray(camera_rotation, dtype=np.float64)
    if R.shape != (3, 3) or not np.allclose(R.T @ R, np.eye(3), atol=1e-6):
        raise ValueError("camera rotation must be an orthonormal 3x3 matrix")
    out = normal_map @ R  # row-vector form of R^T n
    valid = np.any(normal_map != 0, axis=-1)
    out[~valid] = 0.0
    return out.astype(normal_map.dtype)
