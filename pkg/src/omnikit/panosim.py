"""Analytic ray-cast renderer for equirectangular color / depth / normal triplets.

Scenes are lists of spheres, planes and axis-aligned boxes lit by a sun and an
ambient sky term.  Geometry (depth, normals) is traced independently of the
lighting, so changing the time of day only changes color.  Sky pixels carry
depth ``d_max`` and an all-zero normal.
"""

from __future__ import annotations

import concurrent.futures as cf
import json
import math
import os
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.interpolate import CubicSpline

from . import dataio
from .equirect import PanoSample, direction_grid, yaw_matrix

VARIANTS = ("static", "static_vp", "static_vp_dl")
STEREO_BASELINE = 0.065
T_MIN = 1e-6


@dataclass
class Primitive:
    kind: str  # sphere | plane | box
    center: tuple | None = None
    radius: float | None = None
    point: tuple | None = None
    normal: tuple | None = None
    bmin: tuple | None = None
    bmax: tuple | None = None
    albedo: tuple = (0.6, 0.6, 0.6)
    reflective: bool = False
    actor: bool = False
    velocity: tuple | None = None  # displacement per frame

    def __post_init__(self):
        if self.kind == "sphere":
            if self.radius is None or self.radius <= 0:
                raise ValueError("sphere radius must be positive")
        elif self.kind == "plane":
            n = np.asarray(self.normal, dtype=float)
            if abs(np.linalg.norm(n) - 1.0) > 1e-9:
                raise ValueError("plane normal must be unit length")
        elif self.kind == "box":
            if not np.all(np.asarray(self.bmin) < np.asarray(self.bmax)):
                raise ValueError("box min must be below max on every axis")
        else:
            raise ValueError(f"unknown primitive kind {self.kind!r}")

    @classmethod
    def sphere(cls, center, radius, **kw) -> "Primitive":
        return cls("sphere", center=tuple(center), radius=float(radius), **kw)

    @classmethod
    def plane(cls, point, normal, **kw) -> "Primitive":
        return cls("plane", point=tuple(point), normal=tuple(normal), **kw)

    @classmethod
    def box(cls, bmin, bmax, **kw) -> "Primitive":
        return cls("box", bmin=tuple(bmin), bmax=tuple(bmax), **kw)

    def at_frame(self, frame: int) -> "Primitive":
        if self.velocity is None or frame == 0:
            return self
        off = np.asarray(self.velocity) * frame
        if self.kind == "sphere":
            return replace(self, center=tuple(np.asarray(self.center) + off))
        if self.kind == "box":
            return replace(self, bmin=tuple(np.asarray(self.bmin) + off), bmax=tuple(np.asarray(self.bmax) + off))
        return replace(self, point=tuple(np.asarray(self.point) + off))


@dataclass
class Lighting:
    sun_dir: tuple = (0.0, 1.0, 0.0)
    sun_intensity: float = 1.0
    ambient: float = 0.2
    t: float = 0.5
    cloudiness: float = 0.0


@dataclass
class Scene:
    primitives: list = field(default_factory=list)
    lighting: Lighting = field(default_factory=Lighting)
    dynamic_lighting: bool = False
    actors: bool = True
    d_max: float = 150.0

    def __post_init__(self):
        if self.d_max <= 0:
            raise ValueError("d_max must be positive")


# ---------------------------------------------------------------------------
# Intersection
# ---------------------------------------------------------------------------


def _facing(normal: np.ndarray, dirs: np.ndarray) -> np.ndarray:
    flip = np.sum(normal * dirs, axis=-1) > 0
    return np.where(flip[..., None], -normal, normal)


def intersect(origin, dirs, prim: Primitive) -> tuple[np.ndarray, np.ndarray]:
    """Nearest positive hit distance (inf on miss) and unit normal facing the origin.

    ``dirs`` is (..., 3) of unit vectors; ``origin`` broadcasts against it.
    """
    o = np.asarray(origin, dtype=np.float64)
    d = np.asarray(dirs, dtype=np.float64)
    o = np.broadcast_to(o, d.shape)
    if prim.kind == "sphere":
        c = np.asarray(prim.center)
        oc = o - c
        b = np.sum(oc * d, axis=-1)
        cc = np.sum(oc * oc, axis=-1) - prim.radius**2
        disc = b * b - cc
        sq = np.sqrt(np.maximum(disc, 0.0))
        t0, t1 = -b - sq, -b + sq
        t = np.where(t0 > T_MIN, t0, np.where(t1 > T_MIN, t1, np.inf))
        t = np.where(disc >= 0, t, np.inf)
        p = o + d * np.where(np.isfinite(t), t, 0.0)[..., None]
        n = (p - c) / prim.radius
    elif prim.kind == "plane":
        nrm = np.asarray(prim.normal)
        denom = d @ nrm
        with np.errstate(divide="ignore", invalid="ignore"):
            t = ((np.asarray(prim.point) - o) @ nrm) / denom
        t = np.where((np.abs(denom) > 1e-12) & (t > T_MIN), t, np.inf)
        n = np.broadcast_to(nrm, d.shape).copy()
    else:
        lo, hi = np.asarray(prim.bmin), np.asarray(prim.bmax)
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / d
            ta = (lo - o) * inv
            tb = (hi - o) * inv
        tmin = np.fmin(ta, tb)
        tmax = np.fmax(ta, tb)
        t_near = np.max(tmin, axis=-1)
        t_far = np.min(tmax, axis=-1)
        hit = (t_far >= t_near) & (t_far > T_MIN)
        inside = t_near <= T_MIN
        t = np.where(hit, np.where(inside, t_far, t_near), np.inf)
        axis = np.where(inside, np.argmin(tmax, axis=-1), np.argmax(tmin, axis=-1))
        n = np.zeros(d.shape)
        np.put_along_axis(n, axis[..., None], 1.0, axis=-1)
    return t, _facing(n, d)


def trace(prims: list, origin, dirs: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Nearest hit over all primitives: distance, normal, primitive index (-1 = miss)."""
    shape = dirs.shape[:-1]
    best = np.full(shape, np.inf)
    normal = np.zeros(shape + (3,))
    ids = np.full(shape, -1, dtype=np.int64)
    for i, prim in enumerate(prims):
        t, n = intersect(origin, dirs, prim)
        closer = t < best
        best = np.where(closer, t, best)
        normal = np.where(closer[..., None], n, normal)
        ids = np.where(closer, i, ids)
    return best, normal, ids


def occluded(prims: list, points: np.ndarray, direction) -> np.ndarray:
    d = np.broadcast_to(np.asarray(direction, dtype=np.float64), points.shape)
    blocked = np.zeros(points.shape[:-1], dtype=bool)
    for prim in prims:
        t, _ = intersect(points, d, prim)
        blocked |= np.isfinite(t)
    return blocked


# ---------------------------------------------------------------------------
# Lighting and shading
# ---------------------------------------------------------------------------


def sun_state(t: float, cloudiness: float = 0.0) -> Lighting:
    """Sun position and intensities for a time of day ``t`` in [0, 1]."""
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"time of day {t} outside [0, 1]")
    if not 0.0 <= cloudiness <= 1.0:
        raise ValueError(f"cloudiness {cloudiness} outside [0, 1]")
    elev = math.radians(math.sin(math.pi * t) * 80.0)
    azim = math.radians(-90.0 + 180.0 * t)
    sun = max(0.0, math.sin(elev))
    direction = (math.cos(elev) * math.sin(azim), math.sin(elev), math.cos(elev) * math.cos(azim))
    ambient = 0.15 + 0.25 * sun * (1.0 - 0.5 * cloudiness)
    return Lighting(sun_dir=direction, sun_intensity=sun, ambient=ambient, t=t, cloudiness=cloudiness)


def shade(normal, lighting: Lighting, albedo, in_shadow=False) -> np.ndarray:
    """Lambertian color: albedo * (ambient + sun * max(0, n.s)), shadowed points ambient only."""
    n = np.asarray(normal, dtype=np.float64)
    s = np.asarray(lighting.sun_dir, dtype=np.float64)
    lam = np.maximum(0.0, n @ s) * lighting.sun_intensity
    lam = np.where(in_shadow, 0.0, lam)
    return np.clip(np.asarray(albedo) * (lighting.ambient + lam)[..., None], 0.0, 1.0)


def sky_color(dirs: np.ndarray, lighting: Lighting) -> np.ndarray:
    """Vertical gradient with a Gaussian sun disc, desaturated by cloudiness."""
    y = dirs[..., 1:2]
    up = np.clip(y, 0.0, 1.0)
    horizon = np.array([0.78, 0.84, 0.92])
    zenith = np.array([0.24, 0.46, 0.86])
    ground_haze = np.array([0.55, 0.54, 0.50])
    base = np.where(y >= 0, horizon * (1 - up) + zenith * up, ground_haze)
    base = base * (0.35 + 0.65 * lighting.sun_intensity)
    cosang = np.clip(dirs @ np.asarray(lighting.sun_dir), -1.0, 1.0)
    disc = np.exp(-((np.arccos(cosang) / 0.06) ** 2)) * lighting.sun_intensity
    col = base + disc[..., None] * np.array([1.0, 0.93, 0.78])
    gray = col.mean(axis=-1, keepdims=True)
    k = 0.8 * lighting.cloudiness
    return np.clip((1 - k) * col + k * gray, 0.0, 1.0)


# ---------------------------------------------------------------------------
# Rendering
# ---------------------------------------------------------------------------


def _render_eye(scene: Scene, position, dirs_world: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    prims = scene.primitives
    t, normal, ids = trace(prims, position, dirs_world)
    sky = ~np.isfinite(t) | (t > scene.d_max)
    depth = np.where(sky, scene.d_max, t)
    normal = np.where(sky[..., None], 0.0, normal)
    ids = np.where(sky, -1, ids)

    # color pass; geometry above is fixed regardless of lighting
    lt = scene.lighting
    color = sky_color(dirs_world, lt)
    hit = ~sky
    if hit.any():
        p = np.asarray(position) + dirs_world[hit] * depth[hit][:, None]
        n = normal[hit]
        albedo = np.array([prims[i].albedo for i in range(len(prims))])[ids[hit]]
        shadow = np.zeros(len(p), dtype=bool)
        lit = (n @ np.asarray(lt.sun_dir)) > 0
        if lt.sun_intensity > 0 and lit.any():
            shadow[lit] = occluded(prims, p[lit] + n[lit] * 1e-4, lt.sun_dir)
        c = shade(n, lt, albedo, shadow)
        refl = np.array([prims[i].reflective for i in range(len(prims))])[ids[hit]]
        if refl.any():
            d = dirs_world[hit][refl]
            r = d - 2 * np.sum(d * n[refl], axis=-1, keepdims=True) * n[refl]
            c[refl] = 0.5 * c[refl] + 0.5 * sky_color(r, lt)
        color[hit] = c
    return color, depth, normal, ids


def render(
    scene: Scene,
    camera_position,
    W: int,
    H: int,
    stereo: bool = False,
    yaw: float = 0.0,
    metadata: dict | None = None,
    dtype=np.float32,
):
    """Render one panorama (or a top/bottom eye pair when ``stereo``).

    Depth is the euclidean hit distance clamped to ``d_max``; anything beyond
    is sky.  Normals are world-space.  Maps are traced in float64 and cast to
    ``dtype`` at the end (float32 is what datasets store).
    """
    if W != 2 * H or H <= 0:
        raise ValueError(f"panoramas must be 2:1, got {W}x{H}")
    dirs = direction_grid(H, W) @ yaw_matrix(yaw).T
    pos = np.asarray(camera_position, dtype=np.float64)
    meta = {"position": pos.tolist(), "yaw": float(yaw), "t": scene.lighting.t, **(metadata or {})}

    def eye(p, tag):
        color, depth, normal, ids = _render_eye(scene, p, dirs)
        return PanoSample(
            color=color.astype(dtype),
            depth=depth.astype(dtype),
            normal=normal.astype(dtype),
            metadata={**meta, "eye": tag, "hit_ids": ids},
        )

    top = eye(pos, "top")
    if not stereo:
        return top
    return top, eye(pos + np.array([0.0, STEREO_BASELINE, 0.0]), "bottom")


# ---------------------------------------------------------------------------
# Procedural scenes and dataset generation
# ---------------------------------------------------------------------------


@dataclass
class GenConfig:
    seed: int = 0
    variant: str = "static_vp_dl"
    height: int = 64
    width: int = 128
    scenes: int = 1
    train_paths: int = 2
    frames_per_path: int = 10
    test_frames: int | None = None
    d_max: float = 150.0
    stereo: bool = False
    val_fraction: float = 0.15
    camera_height: float = 1.6
    buildings: int = 14
    trees: int = 10
    vehicles: int = 5
    pedestrians: int = 6

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.frames_per_path < 1:
            raise ValueError("need at least one frame per path")
        if self.width != 2 * self.height:
            raise ValueError("resolution must be 2:1")

    @classmethod
    def from_json(cls, text: str) -> "GenConfig":
        return cls(**json.loads(text))


@dataclass
class SceneLayout:
    static: list
    actors: list
    paths: list  # list of (F, 3) camera positions
    cloudiness: float


def _camera_path(rng, center, frames: int, radius: float = 12.0) -> np.ndarray:
    angles = np.sort(rng.uniform(0, 1.5 * np.pi, size=4)) + rng.uniform(0, 2 * np.pi)
    rad = rng.uniform(0.4, 1.0, size=4) * radius
    ctrl = np.stack([center[0] + rad * np.cos(angles), np.zeros(4), center[1] + rad * np.sin(angles)], axis=1)
    spline = CubicSpline(np.linspace(0.0, 1.0, 4), ctrl, axis=0)
    s = np.linspace(0.0, 1.0, frames) if frames > 1 else np.array([0.5])
    return spline(s)


def _far_from(points: np.ndarray, xz, clearance: float) -> bool:
    return bool(np.all(np.hypot(points[:, 0] - xz[0], points[:, 2] - xz[1]) > clearance))


def make_layout(cfg: GenConfig, scene_index: int) -> SceneLayout:
    """Deterministic layout for one scene: static geometry, actor proxies, camera paths.

    Static geometry and actors use independent random streams so toggling
    actors never perturbs the rest of the scene.
    """
    rng = np.random.default_rng([cfg.seed, scene_index, 0])
    ground = -cfg.camera_height
    n_paths = cfg.train_paths + (1 if scene_index == 0 else 0)
    paths = []
    for k in range(n_paths):
        held_out = scene_index == 0 and k == n_paths - 1
        frames = (cfg.test_frames or cfg.frames_per_path) if held_out else cfg.frames_per_path
        center = (60.0, 0.0) if held_out else (rng.uniform(-10, 10), rng.uniform(-10, 10))
        paths.append(_camera_path(rng, center, frames))
    dense = np.concatenate(paths)
    static = [Primitive.plane((0.0, ground, 0.0), (0.0, 1.0, 0.0), albedo=(0.42, 0.45, 0.36))]

    def place(size, tries=200, spread=40.0):
        for _ in range(tries):
            xz = rng.uniform(-spread, spread, size=2)
            if _far_from(dense, xz, size + 2.5):
                return xz
        return None

    for _ in range(cfg.buildings):
        w, dpt, h = rng.uniform(3, 10), rng.uniform(3, 10), rng.uniform(3, 18)
        xz = place(max(w, dpt) * 0.75)
        if xz is None:
            continue
        shade_ = rng.uniform(0.45, 0.85)
        tint = rng.uniform(-0.08, 0.08, size=3)
        static.append(
            Primitive.box(
                (xz[0] - w / 2, ground, xz[1] - dpt / 2),
                (xz[0] + w / 2, ground + h, xz[1] + dpt / 2),
                albedo=tuple(np.clip(shade_ + tint, 0, 1)),
            )
        )
    for _ in range(cfg.trees):
        r = rng.uniform(0.8, 2.2)
        xz = place(r)
        if xz is None:
            continue
        trunk_h = rng.uniform(1.5, 3.0)
        static.append(Primitive.box((xz[0] - 0.15, ground, xz[1] - 0.15), (xz[0] + 0.15, ground + trunk_h, xz[1] + 0.15),
                                    albedo=(0.35, 0.25, 0.15)))
        static.append(Primitive.sphere((xz[0], ground + trunk_h + r * 0.8, xz[1]), r,
                                       albedo=(0.15 + rng.uniform(0, 0.1), 0.45 + rng.uniform(0, 0.15), 0.15)))
    xz = place(4.0)
    if xz is not None:
        static.append(Primitive.box((xz[0] - 4, ground, xz[1] - 3), (xz[0] + 4, ground + 0.02, xz[1] + 3),
                                    albedo=(0.2, 0.3, 0.45), reflective=True))

    arng = np.random.default_rng([cfg.seed, scene_index, 1])
    actors = []
    max_frames = max(len(p) for p in paths)
    for kind, count in (("vehicle", cfg.vehicles), ("pedestrian", cfg.pedestrians)):
        for _ in range(count):
            if kind == "vehicle":
                size = np.array([arng.uniform(3.8, 5.0), arng.uniform(1.3, 1.9), arng.uniform(1.7, 2.1)])
                speed = arng.uniform(0.05, 0.2)
                albedo = tuple(arng.uniform(0.1, 0.9, size=3))
            else:
                size = np.array([0.5, arng.uniform(1.6, 1.9), 0.5])
                speed = arng.uniform(0.01, 0.05)
                albedo = tuple(arng.uniform(0.2, 0.7, size=3))
            heading = arng.uniform(0, 2 * np.pi)
            vel = np.array([np.cos(heading), 0.0, np.sin(heading)]) * speed
            for _try in range(100):
                xz = arng.uniform(-25, 25, size=2)
                ends = [xz, xz + vel[[0, 2]] * max_frames]
                mid = (ends[0] + ends[1]) / 2
                if all(_far_from(dense, e, size.max() / 2 + 2.0) for e in (ends[0], ends[1], mid)):
                    break
            else:
                continue
            lo = (xz[0] - size[0] / 2, ground, xz[1] - size[2] / 2)
            hi = (xz[0] + size[0] / 2, ground + size[1], xz[1] + size[2] / 2)
            actors.append(Primitive.box(lo, hi, albedo=albedo, actor=True, velocity=tuple(vel)))
    return SceneLayout(static=static, actors=actors, paths=paths, cloudiness=float(rng.uniform(0.0, 0.6)))


def frame_time(cfg: GenConfig, frame: int, frames: int) -> float:
    if cfg.variant != "static_vp_dl":
        return 0.5
    return 0.1 + 0.8 * frame / (frames - 1) if frames > 1 else 0.5


def frame_scene(cfg: GenConfig, layout: SceneLayout, frame: int, frames: int) -> Scene:
    with_actors = cfg.variant != "static"
    prims = list(layout.static)
    if with_actors:
        prims += [a.at_frame(frame) for a in layout.actors]
    lighting = sun_state(frame_time(cfg, frame, frames), layout.cloudiness)
    return Scene(prims, lighting, dynamic_lighting=cfg.variant == "static_vp_dl", actors=with_actors, d_max=cfg.d_max)


def _heading(path: np.ndarray, f: int) -> float:
    a = path[max(f - 1, 0)]
    b = path[min(f + 1, len(path) - 1)]
    d = b - a
    if np.hypot(d[0], d[2]) < 1e-9:
        return 0.0
    return float(math.atan2(d[0], d[2]))


def worker_count() -> int:
    try:
        return max(1, int(os.environ.get("OMNIKIT_THREADS", "1")))
    except ValueError:
        return 1


@dataclass
class _Job:
    record: dataio.SampleRecord
    scene: Scene
    position: np.ndarray
    yaw: float


def _render_job(job: _Job, cfg: GenConfig):
    return render(job.scene, job.position, cfg.width, cfg.height, stereo=cfg.stereo, yaw=job.yaw,
                  metadata={"frame_id": job.record.frame_id})


def plan_dataset(cfg: GenConfig) -> tuple[list[_Job], str]:
    jobs = []
    test_path = "s00p%02d" % cfg.train_paths
    for s in range(cfg.scenes):
        layout = make_layout(cfg, s)
        for k, path in enumerate(layout.paths):
            path_id = f"s{s:02d}p{k:02d}"
            for f in range(len(path)):
                fid = f"{path_id}f{f:04d}"
                scene = frame_scene(cfg, layout, f, len(path))
                yaw = _heading(path, f)
                rec = dataio.SampleRecord(
                    frame_id=fid, position=path[f].tolist(), yaw=yaw, t=scene.lighting.t, variant=cfg.variant,
                    split="test" if path_id == test_path else "train", path_id=path_id, frame=f,
                    **dataio.sample_paths(fid),
                )
                jobs.append(_Job(rec, scene, path[f], yaw))
    train_idx = [i for i, j in enumerate(jobs) if j.record.split == "train"]
    n_val = int(round(len(train_idx) * cfg.val_fraction))
    order = np.random.default_rng([cfg.seed, 7]).permutation(len(train_idx))
    for i in order[:n_val]:
        jobs[train_idx[i]].record.split = "val"
    return jobs, test_path


def generate_dataset(cfg: GenConfig, out_dir, threads: int | None = None) -> dataio.DatasetManifest:
    """Render every frame and write samples plus ``manifest.jsonl`` under ``out_dir``.

    Frames render concurrently on ``threads`` workers (default ``OMNIKIT_THREADS``);
    files and the manifest are written in a fixed order, so output bytes do not
    depend on the worker count.
    """
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise OSError(f"cannot create dataset directory {out}: {e}") from None
    if not os.access(out, os.W_OK):
        raise PermissionError(f"dataset directory {out} is not writable")
    jobs, test_path = plan_dataset(cfg)
    manifest = dataio.DatasetManifest(
        width=cfg.width, height=cfg.height, d_max=cfg.d_max, seed=cfg.seed, stereo=cfg.stereo,
        variant=cfg.variant, test_path=test_path, generator=asdict(cfg),
    )
    n = threads or worker_count()
    with cf.ThreadPoolExecutor(max_workers=n) as pool:
        results = pool.map(lambda j: _render_job(j, cfg), jobs)
        for job, res in zip(jobs, results):
            if cfg.stereo:
                dataio.write_sample(out, job.record, res[0], res[1])
            else:
                dataio.write_sample(out, job.record, res)
            manifest.records.append(job.record)
    dataio.write_manifest(out, manifest)
    return manifest
