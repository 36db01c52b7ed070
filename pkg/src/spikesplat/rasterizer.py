"""Differentiable tiled rasterization of Gaussian splats.

Forward: project, depth-sort (stable, ties broken by splat index), bin
splats into image tiles, then alpha-blend front to back per pixel. Three
entry points share that path:

* :func:`render` - one camera pose, sharp image.
* :func:`render_accumulated` - pixel mean over n keyframe poses, the
  motion-blurred image a spike accumulation window observes.
* :func:`render_interval` - one pose interpolated at the median spike
  interval midpoint, carrying the interval validity mask.

Backward: :func:`backward` replays the blend per pixel back to front and
chains analytically through the alpha clamp, the activations, the
projection Jacobian and (for accumulation) the 1/n averaging, yielding a
:class:`GradientBundle` aligned with the cloud's parameter arrays.

Tiling and the per-splat footprint radius are performance devices. The
footprint drops contributions whose blended alpha is below the settings'
``cutoff_weight``; exact mode (``RasterSettings.exact()``) shrinks that to
1e-12 and disables early termination, making the output match a naive
full-support evaluation to float precision. Gradients differentiate the
truncated forward, so exact mode is also what finite-difference checks use.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import _raster_kernels as _k
from .camera import CameraTrajectory, Intrinsics, Pose
from .gaussians import GaussianCloud, ProjectedSplats, project
from .recon import IntervalImage


@dataclass(frozen=True)
class RasterSettings:
    tile_size: int = 16
    alpha_max: float = 0.99
    stop_transmittance: float = 1e-4
    near: float = 0.01
    dilation: float = 0.3
    cutoff_weight: float = 1.0 / 255.0

    @classmethod
    def exact(cls) -> "RasterSettings":
        """No early termination, footprints wide enough that truncation is
        below float32 resolution; for oracle comparisons and gradient checks."""
        return cls(stop_transmittance=0.0, cutoff_weight=1e-12)


@dataclass
class RenderedImage:
    pixels: np.ndarray         # (H, W, 3)
    transmittance: np.ndarray  # (H, W) remaining transmittance
    valid_mask: np.ndarray | None = None

    def luminance(self) -> np.ndarray:
        return self.pixels.mean(axis=2)


@dataclass
class GradientBundle:
    d_positions: np.ndarray
    d_rotations: np.ndarray
    d_log_scales: np.ndarray
    d_opacity_logits: np.ndarray
    d_color_logits: np.ndarray

    @classmethod
    def zeros(cls, cloud: GaussianCloud, dtype=np.float64) -> "GradientBundle":
        m = cloud.num_splats
        return cls(np.zeros((m, 3), dtype), np.zeros((m, 4), dtype),
                   np.zeros((m, 3), dtype), np.zeros(m, dtype), np.zeros((m, 3), dtype))

    def __iadd__(self, other: "GradientBundle") -> "GradientBundle":
        self.d_positions += other.d_positions
        self.d_rotations += other.d_rotations
        self.d_log_scales += other.d_log_scales
        self.d_opacity_logits += other.d_opacity_logits
        self.d_color_logits += other.d_color_logits
        return self

    def scaled(self, s: float) -> "GradientBundle":
        return GradientBundle(self.d_positions * s, self.d_rotations * s,
                              self.d_log_scales * s, self.d_opacity_logits * s,
                              self.d_color_logits * s)

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(a)) for a in (
            self.d_positions, self.d_rotations, self.d_log_scales,
            self.d_opacity_logits, self.d_color_logits))


@dataclass
class RenderCache:
    """Forward state needed to replay one pose's blend backwards."""

    cloud: GaussianCloud
    pose: Pose
    intrinsics: Intrinsics
    settings: RasterSettings
    sorted_ids: np.ndarray       # (K,) original splat indices, front to back
    proj: ProjectedSplats        # full-length projection (float64)
    km: dict = field(repr=False, default=None)  # compact kernel arrays
    pair_splat: np.ndarray = None
    tile_start: np.ndarray = None
    t_out: np.ndarray = None
    n_contrib: np.ndarray = None
    tiles_x: int = 0


@dataclass
class AccumCache:
    caches: list
    n: int


@dataclass
class IntervalCache:
    cache: RenderCache
    valid_mask: np.ndarray


def _bin_tiles(mean2d, radius, tile_size, tiles_x, tiles_y):
    """Per-tile splat lists; input arrays are already in blend order."""
    k = mean2d.shape[0]
    num_tiles = tiles_x * tiles_y
    x0 = np.clip(np.floor((mean2d[:, 0] - radius) / tile_size), 0, tiles_x - 1).astype(np.int64)
    x1 = np.clip(np.floor((mean2d[:, 0] + radius) / tile_size), 0, tiles_x - 1).astype(np.int64)
    y0 = np.clip(np.floor((mean2d[:, 1] - radius) / tile_size), 0, tiles_y - 1).astype(np.int64)
    y1 = np.clip(np.floor((mean2d[:, 1] + radius) / tile_size), 0, tiles_y - 1).astype(np.int64)
    nx = x1 - x0 + 1
    counts = nx * (y1 - y0 + 1)
    total = int(counts.sum())
    if total == 0:
        return (np.zeros(0, dtype=np.int32),
                np.zeros(num_tiles + 1, dtype=np.int64))
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    sid = np.repeat(np.arange(k), counts)
    within = np.arange(total) - np.repeat(starts, counts)
    dx = within % nx[sid]
    dy = within // nx[sid]
    tid = (y0[sid] + dy) * tiles_x + (x0[sid] + dx)
    order = np.lexsort((sid, tid))
    pair_splat = sid[order].astype(np.int32)
    tile_start = np.searchsorted(tid[order], np.arange(num_tiles + 1)).astype(np.int64)
    return pair_splat, tile_start


def render(cloud: GaussianCloud, pose: Pose, intrinsics: Intrinsics,
           settings: RasterSettings = RasterSettings()) -> tuple[RenderedImage, RenderCache]:
    h, w = intrinsics.height, intrinsics.width
    dtype = cloud.dtype
    proj = project(cloud, pose, intrinsics, near=settings.near,
                   dilation=settings.dilation, cutoff_weight=settings.cutoff_weight)
    ids = np.flatnonzero(proj.visible)
    order = np.argsort(proj.depth[ids], kind="stable")
    sorted_ids = ids[order]

    img = np.zeros((h, w, 3), dtype=dtype)
    t_out = np.ones((h, w), dtype=dtype)
    n_contrib = np.zeros((h, w), dtype=np.int32)
    tiles_x = (w + settings.tile_size - 1) // settings.tile_size
    tiles_y = (h + settings.tile_size - 1) // settings.tile_size

    cache = RenderCache(cloud=cloud, pose=pose, intrinsics=intrinsics,
                        settings=settings, sorted_ids=sorted_ids, proj=proj,
                        tiles_x=tiles_x, t_out=t_out, n_contrib=n_contrib)
    if sorted_ids.size == 0:
        cache.pair_splat = np.zeros(0, dtype=np.int32)
        cache.tile_start = np.zeros(tiles_x * tiles_y + 1, dtype=np.int64)
        cache.km = {}
        return RenderedImage(img, t_out), cache

    mean2d = proj.mean2d[sorted_ids]
    conic = proj.conic()[sorted_ids]
    km = {
        "means": np.ascontiguousarray(mean2d, dtype=dtype),
        "conics": np.ascontiguousarray(conic, dtype=dtype),
        "colors": np.ascontiguousarray(proj.color[sorted_ids], dtype=dtype),
        "alphas": np.ascontiguousarray(proj.alpha[sorted_ids], dtype=dtype),
    }
    pair_splat, tile_start = _bin_tiles(mean2d, proj.radius[sorted_ids],
                                        settings.tile_size, tiles_x, tiles_y)
    _k.blend_forward(km["means"], km["conics"], km["colors"], km["alphas"],
                     pair_splat, tile_start, settings.tile_size, tiles_x,
                     dtype.type(settings.alpha_max), dtype.type(settings.stop_transmittance),
                     img, t_out, n_contrib)
    cache.km = km
    cache.pair_splat = pair_splat
    cache.tile_start = tile_start
    return RenderedImage(img, t_out), cache


def render_accumulated(cloud: GaussianCloud, keyframe_poses: list[Pose],
                       intrinsics: Intrinsics,
                       settings: RasterSettings = RasterSettings()
                       ) -> tuple[RenderedImage, AccumCache]:
    """Pixel mean of single-pose renders over the given keyframes (n in [1, 9])."""
    n = len(keyframe_poses)
    if not 1 <= n <= 9:
        raise ValueError(f"keyframe count must be in [1, 9], got {n}")
    h, w = intrinsics.height, intrinsics.width
    acc = np.zeros((h, w, 3), dtype=np.float64)
    t_acc = np.zeros((h, w), dtype=np.float64)
    caches = []
    for pose in keyframe_poses:
        img, cache = render(cloud, pose, intrinsics, settings)
        acc += img.pixels
        t_acc += img.transmittance
        caches.append(cache)
    dtype = cloud.dtype
    out = RenderedImage((acc / n).astype(dtype), (t_acc / n).astype(dtype))
    return out, AccumCache(caches=caches, n=n)


def render_interval(cloud: GaussianCloud, interval_image: IntervalImage,
                    trajectory: CameraTrajectory,
                    settings: RasterSettings = RasterSettings()
                    ) -> tuple[RenderedImage, IntervalCache]:
    """Render at the pose interpolated at the interval image's median
    midpoint time; the image carries the interval validity mask."""
    if not interval_image.valid.any():
        raise ValueError("interval image has no valid pixels")
    t_mid = interval_image.median_mid_time()
    pose = trajectory.pose_at(t_mid)
    img, cache = render(cloud, pose, trajectory.intrinsics, settings)
    img.valid_mask = interval_image.valid.copy()
    return img, IntervalCache(cache=cache, valid_mask=img.valid_mask)


# -- backward -----------------------------------------------------------------

def backward(cache, upstream: np.ndarray) -> GradientBundle:
    """Gradients of sum(upstream * pixels) w.r.t. all splat parameters.

    ``cache`` is whatever the matching forward returned; ``upstream`` is the
    (H, W, 3) loss gradient w.r.t. the rendered pixels.
    """
    if cache is None:
        raise ValueError("missing forward cache; call a render function first")
    if isinstance(cache, AccumCache):
        bundle = None
        share = np.asarray(upstream, dtype=np.float64) / cache.n
        for sub in cache.caches:
            b = _backward_single(sub, share)
            bundle = b if bundle is None else bundle.__iadd__(b)
        return bundle
    if isinstance(cache, IntervalCache):
        return _backward_single(cache.cache, upstream)
    if isinstance(cache, RenderCache):
        return _backward_single(cache, upstream)
    raise TypeError(f"unknown cache type {type(cache)!r}")


def _backward_single(cache: RenderCache, upstream: np.ndarray) -> GradientBundle:
    cloud = cache.cloud
    dtype = cloud.dtype
    bundle = GradientBundle.zeros(cloud, dtype=np.float64)
    k = cache.sorted_ids.size
    if k == 0:
        return _cast_bundle(bundle, dtype)
    settings = cache.settings
    num_tiles = cache.tile_start.shape[0] - 1

    up = np.ascontiguousarray(upstream, dtype=dtype)
    g_mean = np.zeros((num_tiles, k, 2), dtype=dtype)
    g_conic = np.zeros((num_tiles, k, 3), dtype=dtype)
    g_color = np.zeros((num_tiles, k, 3), dtype=dtype)
    g_alpha = np.zeros((num_tiles, k), dtype=dtype)
    km = cache.km
    _k.blend_backward(km["means"], km["conics"], km["colors"], km["alphas"],
                      cache.pair_splat, cache.tile_start, settings.tile_size,
                      cache.tiles_x, dtype.type(settings.alpha_max),
                      cache.t_out, cache.n_contrib, up,
                      g_mean, g_conic, g_color, g_alpha)
    # Fixed-order reduction over tiles keeps results thread-count independent.
    gm = g_mean.sum(axis=0, dtype=np.float64)
    gq = g_conic.sum(axis=0, dtype=np.float64)
    gc = g_color.sum(axis=0, dtype=np.float64)
    ga = g_alpha.sum(axis=0, dtype=np.float64)

    ids = cache.sorted_ids
    proj = cache.proj
    intr = cache.intrinsics
    fx, fy = intr.fx, intr.fy

    # Activation chains.
    alpha = proj.alpha[ids]
    color = proj.color[ids]
    d_opacity = ga * alpha * (1.0 - alpha)
    d_color_logits = gc * color * (1.0 - color)

    # conic -> 2D covariance. Packed B collects both off-diagonal slots, so
    # the full-matrix gradient carries half in each.
    conic = proj.conic()[ids]
    kfull = np.empty((k, 2, 2))
    kfull[:, 0, 0] = conic[:, 0]
    kfull[:, 0, 1] = kfull[:, 1, 0] = conic[:, 1]
    kfull[:, 1, 1] = conic[:, 2]
    gfull = np.empty((k, 2, 2))
    gfull[:, 0, 0] = gq[:, 0]
    gfull[:, 0, 1] = gfull[:, 1, 0] = 0.5 * gq[:, 1]
    gfull[:, 1, 1] = gq[:, 2]
    d_cov2d = -np.einsum("mij,mjk,mkl->mil", kfull, gfull, kfull)

    # 2D covariance -> camera-frame covariance and Jacobian.
    m_cam = proj.cam_xyz[ids]
    x, y, z = m_cam[:, 0], m_cam[:, 1], m_cam[:, 2]
    jac = np.zeros((k, 2, 3))
    jac[:, 0, 0] = fx / z
    jac[:, 0, 2] = -fx * x / z**2
    jac[:, 1, 1] = fy / z
    jac[:, 1, 2] = -fy * y / z**2
    cov_cam = proj.cov_cam[ids]
    d_cov_cam = np.einsum("mji,mjk,mkl->mil", jac, d_cov2d, jac)
    d_jac = 2.0 * np.einsum("mij,mjk,mkl->mil", d_cov2d, jac, cov_cam)

    # Mean gradients: screen mean path plus the Jacobian's dependence on the
    # camera-frame mean.
    gu, gv = gm[:, 0], gm[:, 1]
    dm = np.empty((k, 3))
    dm[:, 0] = gu * fx / z + d_jac[:, 0, 2] * (-fx / z**2)
    dm[:, 1] = gv * fy / z + d_jac[:, 1, 2] * (-fy / z**2)
    dm[:, 2] = (
        -gu * fx * x / z**2 - gv * fy * y / z**2
        + d_jac[:, 0, 0] * (-fx / z**2) + d_jac[:, 0, 2] * (2 * fx * x / z**3)
        + d_jac[:, 1, 1] * (-fy / z**2) + d_jac[:, 1, 2] * (2 * fy * y / z**3)
    )
    v_w2c, _ = cache.pose.world_to_cam()
    d_positions = dm @ v_w2c

    # Camera-frame covariance -> world covariance -> rotation and scales.
    d_cov_world = np.einsum("ji,mjk,kl->mil", v_w2c, d_cov_cam, v_w2c)
    q_raw = np.asarray(cloud.rotations, dtype=np.float64)[ids]
    norms = np.linalg.norm(q_raw, axis=1, keepdims=True)
    q = q_raw / norms
    from .camera import quat_to_rot
    rot = quat_to_rot(q)
    s_log = np.asarray(cloud.log_scales, dtype=np.float64)[ids]
    d_eig = np.exp(2.0 * s_log)
    rt_g_r = np.einsum("mji,mjk,mkl->mil", rot, d_cov_world, rot)
    d_log_scales = np.einsum("mii->mi", rt_g_r) * 2.0 * d_eig
    d_rot = 2.0 * np.einsum("mij,mjk->mik", d_cov_world, rot) * d_eig[:, None, :]
    d_q_unit = _rotation_quat_grad(q, d_rot)
    # Chain through the defensive normalization q / |q|.
    inner = np.sum(d_q_unit * q, axis=1, keepdims=True)
    d_rotations = (d_q_unit - inner * q) / norms

    _scatter(bundle.d_positions, ids, d_positions)
    _scatter(bundle.d_rotations, ids, d_rotations)
    _scatter(bundle.d_log_scales, ids, d_log_scales)
    _scatter(bundle.d_opacity_logits, ids, d_opacity)
    _scatter(bundle.d_color_logits, ids, d_color_logits)
    return _cast_bundle(bundle, dtype)


def _rotation_quat_grad(q: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Contract dL/dR with dR/dq for unit quaternions q = (w, x, y, z)."""
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    g00, g01, g02 = g[:, 0, 0], g[:, 0, 1], g[:, 0, 2]
    g10, g11, g12 = g[:, 1, 0], g[:, 1, 1], g[:, 1, 2]
    g20, g21, g22 = g[:, 2, 0], g[:, 2, 1], g[:, 2, 2]
    dw = 2 * (-z * g01 + y * g02 + z * g10 - x * g12 - y * g20 + x * g21)
    dx = 2 * (y * g01 + z * g02 + y * g10 - 2 * x * g11 - w * g12
              + z * g20 + w * g21 - 2 * x * g22)
    dy = 2 * (-2 * y * g00 + x * g01 + w * g02 + x * g10 + z * g12
              - w * g20 + z * g21 - 2 * y * g22)
    dz = 2 * (-2 * z * g00 - w * g01 + x * g02 + w * g10 - 2 * z * g11
              + y * g12 + x * g20 + y * g21)
    return np.stack([dw, dx, dy, dz], axis=1)


def _scatter(dest: np.ndarray, ids: np.ndarray, values: np.ndarray) -> None:
    dest[ids] = values


def _cast_bundle(bundle: GradientBundle, dtype) -> GradientBundle:
    if dtype == np.float64:
        return bundle
    return GradientBundle(*(getattr(bundle, f"d_{g}").astype(dtype)
                            for g in ("positions", "rotations", "log_scales",
                                      "opacity_logits", "color_logits")))


def keyframe_indices(t0: int, t1: int, n: int) -> list[int]:
    """n frame indices uniformly spaced over [t0, t1] inclusive (floored)."""
    if n == 1:
        return [(t0 + t1) // 2]
    span = t1 - t0
    return [t0 + (i * span) // (n - 1) for i in range(n)]
