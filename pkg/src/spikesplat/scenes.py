"""Synthetic ground-truth scenes: lambertian primitives ray-cast along a
moving camera, producing radiance frame sequences, spike streams and clean
holdout views for evaluation.

Scenes are grayscale (scalar albedo in [0, 1]) so the monochrome spike
supervision is exact. Shading is a single fixed directional light plus an
ambient term; no shadows or secondary bounces.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .camera import CameraTrajectory, Intrinsics, Pose, look_at
from .sensor import SensorConfig, simulate
from .stream import SpikeStream

_LIGHT_DIR = np.array([0.35, -0.85, 0.4])
_LIGHT_DIR = _LIGHT_DIR / np.linalg.norm(_LIGHT_DIR)
_AMBIENT = 0.42


@dataclass(frozen=True)
class Texture:
    """Procedural scalar albedo: solid, checker or axis gradient."""

    kind: str = "solid"          # solid | checker | gradient
    value: float = 0.5           # solid value, checker "a"
    value2: float = 0.5          # checker "b", gradient end value
    cell: float = 0.5            # checker cell edge length
    axis: int = 1                # gradient world axis
    lo: float = -1.0             # gradient span
    hi: float = 1.0

    def albedo(self, points: np.ndarray) -> np.ndarray:
        if self.kind == "solid":
            return np.full(points.shape[:-1], self.value)
        if self.kind == "checker":
            cells = np.floor(points / self.cell).astype(np.int64)
            parity = (cells[..., 0] + cells[..., 1] + cells[..., 2]) & 1
            return np.where(parity == 0, self.value, self.value2)
        if self.kind == "gradient":
            f = np.clip((points[..., self.axis] - self.lo) / (self.hi - self.lo), 0, 1)
            return self.value + f * (self.value2 - self.value)
        raise ValueError(f"unknown texture kind {self.kind!r}")


@dataclass(frozen=True)
class Sphere:
    center: tuple
    radius: float
    texture: Texture
    emissive: float = 0.0


@dataclass(frozen=True)
class Box:
    lo: tuple
    hi: tuple
    texture: Texture
    emissive: float = 0.0


@dataclass(frozen=True)
class GroundPlane:
    y: float
    extent: float  # |x|, |z| <= extent
    texture: Texture
    emissive: float = 0.0


@dataclass(frozen=True)
class SceneBounds:
    lo: np.ndarray
    hi: np.ndarray

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.lo + self.hi)

    @property
    def diagonal(self) -> float:
        return float(np.linalg.norm(self.hi - self.lo))


@dataclass(frozen=True)
class SyntheticScene:
    primitives: tuple
    background: float = 0.2
    name: str = "custom"

    def bounds(self) -> SceneBounds:
        los, his = [], []
        for p in self.primitives:
            if isinstance(p, Sphere):
                c = np.asarray(p.center, dtype=np.float64)
                los.append(c - p.radius)
                his.append(c + p.radius)
            elif isinstance(p, Box):
                los.append(np.asarray(p.lo, dtype=np.float64))
                his.append(np.asarray(p.hi, dtype=np.float64))
            elif isinstance(p, GroundPlane):
                # The plane only bounds the scene vertically; clamp its huge
                # footprint so orbit radii stay sane.
                e = min(p.extent, 2.0)
                los.append(np.array([-e, p.y, -e]))
                his.append(np.array([e, p.y + 1e-3, e]))
        if not los:
            return SceneBounds(np.full(3, -1.0), np.full(3, 1.0))
        return SceneBounds(np.min(los, axis=0), np.max(his, axis=0))


# -- ray casting -------------------------------------------------------------

def _intersect_sphere(o, d, s: Sphere):
    c = np.asarray(s.center, dtype=np.float64)
    oc = o - c
    a = np.sum(d * d, axis=-1)
    b = np.sum(d * oc, axis=-1)
    c0 = np.sum(oc * oc, axis=-1) - s.radius ** 2
    disc = b * b - a * c0
    hit = disc > 0
    sq = np.sqrt(np.where(hit, disc, 0.0))
    t0 = (-b - sq) / a
    t1 = (-b + sq) / a
    t = np.where(t0 > 1e-6, t0, t1)
    hit &= t > 1e-6
    t = np.where(hit, t, np.inf)
    pts = o + t[..., None] * d
    normals = (pts - c) / s.radius
    return t, normals


def _intersect_box(o, d, box: Box):
    lo = np.asarray(box.lo, dtype=np.float64)
    hi = np.asarray(box.hi, dtype=np.float64)
    inv = 1.0 / np.where(np.abs(d) < 1e-12, np.copysign(1e-12, d), d)
    t_lo = (lo - o) * inv
    t_hi = (hi - o) * inv
    t_near = np.minimum(t_lo, t_hi)
    t_far = np.maximum(t_lo, t_hi)
    tmin = t_near.max(axis=-1)
    tmax = t_far.min(axis=-1)
    hit = (tmax > np.maximum(tmin, 1e-6))
    t = np.where(tmin > 1e-6, tmin, tmax)
    hit &= t > 1e-6
    t = np.where(hit, t, np.inf)
    axis = np.argmax(t_near, axis=-1)
    pts = o + t[..., None] * d
    normals = np.zeros_like(pts)
    mid = 0.5 * (lo + hi)
    for k in range(3):
        sel = axis == k
        normals[sel, k] = np.sign(pts[sel, k] - mid[k])
    return t, normals


def _intersect_plane(o, d, plane: GroundPlane):
    dy = d[..., 1]
    t = np.where(np.abs(dy) > 1e-12, (plane.y - o[..., 1]) / dy, np.inf)
    pts = o + t[..., None] * d
    hit = (t > 1e-6) & (np.abs(pts[..., 0]) <= plane.extent) & (np.abs(pts[..., 2]) <= plane.extent)
    t = np.where(hit, t, np.inf)
    normals = np.zeros_like(pts)
    normals[..., 1] = 1.0
    return t, normals


_INTERSECTORS = {Sphere: _intersect_sphere, Box: _intersect_box, GroundPlane: _intersect_plane}


def render_frame(scene: SyntheticScene, pose: Pose, intrinsics: Intrinsics,
                 resolution: tuple[int, int] | None = None) -> np.ndarray:
    """Ray-cast one radiance frame, (H, W) float64 in [0, 1]."""
    if resolution is None:
        h, w = intrinsics.height, intrinsics.width
    else:
        h, w = resolution
    if h < 8 or w < 8:
        raise ValueError("resolution must be at least 8x8")
    cols, rows = np.meshgrid(np.arange(w), np.arange(h))
    d_cam = np.stack([
        (cols + 0.5 - intrinsics.cx) / intrinsics.fx,
        (rows + 0.5 - intrinsics.cy) / intrinsics.fy,
        np.ones((h, w)),
    ], axis=-1)
    R = pose.R
    d = d_cam @ R.T
    o = pose.tvec[None, None, :]

    best_t = np.full((h, w), np.inf)
    radiance = np.full((h, w), float(scene.background))
    for prim in scene.primitives:
        t, normals = _INTERSECTORS[type(prim)](o, d, prim)
        closer = t < best_t
        if not closer.any():
            continue
        pts = o + t[..., None] * d
        albedo = prim.texture.albedo(pts)
        ndotl = np.maximum(0.0, normals @ (-_LIGHT_DIR))
        shade = _AMBIENT + (1.0 - _AMBIENT) * ndotl
        value = albedo * (prim.emissive + (1.0 - prim.emissive) * shade)
        radiance = np.where(closer, value, radiance)
        best_t = np.where(closer, t, best_t)
    return np.clip(radiance, 0.0, 1.0)


# -- stock scenes ------------------------------------------------------------

def make_scene(name: str) -> SyntheticScene:
    if name == "flat":
        return SyntheticScene(primitives=(), background=0.5, name="flat")
    if name == "checker":
        prims = (
            GroundPlane(y=0.0, extent=6.0,
                        texture=Texture("checker", value=0.25, value2=0.9, cell=0.7)),
            Sphere(center=(0.0, 0.55, 0.0), radius=0.55,
                   texture=Texture("solid", value=0.75)),
            Sphere(center=(-0.95, 0.32, 0.55), radius=0.32,
                   texture=Texture("gradient", value=0.35, value2=0.95, axis=1, lo=0.0, hi=0.7)),
            Box(lo=(0.55, 0.0, -0.95), hi=(1.15, 0.6, -0.35),
                texture=Texture("solid", value=0.45)),
        )
        return SyntheticScene(primitives=prims, background=0.22, name="checker")
    if name == "spheres":
        prims = (
            Sphere(center=(0.0, 0.0, 0.0), radius=0.6,
                   texture=Texture("checker", value=0.3, value2=0.85, cell=0.3)),
            Sphere(center=(1.0, 0.3, 0.2), radius=0.3,
                   texture=Texture("solid", value=0.6)),
            Sphere(center=(-0.9, -0.2, -0.3), radius=0.35,
                   texture=Texture("gradient", value=0.2, value2=0.9, axis=0, lo=-1.3, hi=-0.5)),
        )
        return SyntheticScene(primitives=prims, background=0.25, name="spheres")
    raise ValueError(f"unknown scene {name!r} (choose from: flat, checker, spheres)")


# -- trajectories ------------------------------------------------------------

# Base motion per frame at speed_scale=1; an orbit sweeps 90 degrees over 256
# frames, a line advances 1/256 of the scene diagonal per frame.
ORBIT_STEP_RAD = (np.pi / 2) / 256.0
LINE_STEP_FRAC = 1.0 / 256.0


def make_trajectory(kind: str, duration_frames: int, speed_scale: float,
                    scene_bounds: SceneBounds, intrinsics: Intrinsics,
                    readout_period_us: float = 25.0,
                    orbit_radius: float | None = None,
                    elevation: float | None = None) -> CameraTrajectory:
    """Constant-velocity camera path looking at the scene center.

    ``orbit``: circle of constant angular velocity around the vertical axis.
    ``line``: straight constant-velocity translation with a fixed look-at.
    """
    if duration_frames < 2:
        raise ValueError("duration_frames must be >= 2")
    if not speed_scale > 0:
        raise ValueError("speed_scale must be positive")
    center = scene_bounds.center
    diag = max(scene_bounds.diagonal, 1e-6)
    if orbit_radius is None:
        orbit_radius = 1.35 * diag
    if elevation is None:
        elevation = 0.45 * diag
    poses = []
    if kind == "orbit":
        omega = ORBIT_STEP_RAD * speed_scale
        for t in range(duration_frames):
            ang = omega * t
            eye = center + np.array([
                orbit_radius * np.cos(ang), elevation, orbit_radius * np.sin(ang)
            ])
            R, _ = look_at(eye, center)
            poses.append(Pose.from_rt(R, eye))
    elif kind == "line":
        step = LINE_STEP_FRAC * diag * speed_scale
        start = center + np.array([-0.5 * step * (duration_frames - 1),
                                   elevation, orbit_radius])
        direction = np.array([1.0, 0.0, 0.0])
        for t in range(duration_frames):
            eye = start + direction * (step * t)
            R, _ = look_at(eye, center)
            poses.append(Pose.from_rt(R, eye))
    else:
        raise ValueError(f"unknown trajectory kind {kind!r} (orbit or line)")
    return CameraTrajectory(intrinsics, poses, readout_period_us, speed_scale)


# -- dataset bundles ---------------------------------------------------------

@dataclass
class DatasetBundle:
    """Everything the trainer and evaluator need for one captured scene."""

    stream: SpikeStream
    trajectory: CameraTrajectory
    holdout_indices: list[int]
    holdout_views: list[np.ndarray]  # clean (H, W) float32 renders
    scene_name: str
    bounds_lo: np.ndarray
    bounds_hi: np.ndarray

    @property
    def bounds(self) -> SceneBounds:
        return SceneBounds(np.asarray(self.bounds_lo), np.asarray(self.bounds_hi))

    def save(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        self.stream.save(out / "stream.spks")
        self.trajectory.save(out / "poses.json")
        meta = {
            "scene": self.scene_name,
            "bounds_lo": [float(v) for v in self.bounds_lo],
            "bounds_hi": [float(v) for v in self.bounds_hi],
            "holdout_indices": [int(i) for i in self.holdout_indices],
        }
        with open(out / "scene.json", "w") as f:
            json.dump(meta, f, indent=1)
        gt = out / "gt"
        gt.mkdir(exist_ok=True)
        from .io_utils import save_gray_png
        for idx, view in zip(self.holdout_indices, self.holdout_views):
            np.save(gt / f"view_{idx:05d}.npy", view.astype(np.float32))
            save_gray_png(gt / f"view_{idx:05d}.png", view)

    @classmethod
    def load(cls, bundle_dir) -> "DatasetBundle":
        b = Path(bundle_dir)
        poses_path = b / "poses.json"
        if not poses_path.exists():
            raise FileNotFoundError(f"missing poses.json in {b}")
        stream_path = b / "stream.spks"
        if not stream_path.exists():
            raise FileNotFoundError(f"missing stream.spks in {b}")
        stream = SpikeStream.load(stream_path)
        trajectory = CameraTrajectory.load(poses_path)
        with open(b / "scene.json") as f:
            meta = json.load(f)
        indices = meta["holdout_indices"]
        views = [np.load(b / "gt" / f"view_{i:05d}.npy") for i in indices]
        return cls(stream, trajectory, indices, views, meta["scene"],
                   np.array(meta["bounds_lo"]), np.array(meta["bounds_hi"]))


def generate_dataset(scene: SyntheticScene, trajectory: CameraTrajectory,
                     sensor_config: SensorConfig, holdout_stride: int = 16,
                     out_dir=None) -> DatasetBundle:
    """Render every trajectory pose, convert to spikes, keep clean holdouts.

    Every ``holdout_stride``-th frame's clean render is reserved for novel
    view evaluation; the spike stream itself covers all frames.
    """
    if holdout_stride < 1:
        raise ValueError("holdout_stride must be >= 1")
    intr = trajectory.intrinsics
    frames = [render_frame(scene, pose, intr) for pose in trajectory.poses]
    stream = simulate(frames, sensor_config)
    holdout_indices = list(range(0, len(frames), holdout_stride))
    holdout_views = [frames[i].astype(np.float32) for i in holdout_indices]
    bounds = scene.bounds()
    bundle = DatasetBundle(stream, trajectory, holdout_indices, holdout_views,
                           scene.name, bounds.lo, bounds.hi)
    if out_dir is not None:
        bundle.save(out_dir)
    return bundle
