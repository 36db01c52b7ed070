"""3D Gaussian splat parameterization and camera projection.

Each splat carries unconstrained parameters: world position, rotation
quaternion (kept unit-norm), per-axis log scales, an opacity logit and RGB
color logits. Activations (exp for scale, sigmoid for opacity and color)
guarantee validity without constrained optimization.

The world covariance is R * diag(exp(2*log_scale)) * R^T, symmetric PSD by
construction. Projection to the image uses the affine (Jacobian)
approximation of the pinhole map; the 2D covariance gets a fixed diagonal
dilation so it stays invertible and at least a pixel wide.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .camera import Intrinsics, Pose, quat_to_rot

PARAM_GROUPS = ("positions", "rotations", "log_scales", "opacity_logits", "color_logits")

CKPT_MAGIC = b"GSPC"
CKPT_VERSION = 1
_CKPT_HEADER = struct.Struct("<4sHHI")


class CheckpointError(ValueError):
    """Malformed splat checkpoint data."""


@dataclass
class GaussianCloud:
    positions: np.ndarray       # (M, 3)
    rotations: np.ndarray       # (M, 4) quaternions (w, x, y, z)
    log_scales: np.ndarray      # (M, 3)
    opacity_logits: np.ndarray  # (M,)
    color_logits: np.ndarray    # (M, 3)

    def __post_init__(self):
        m = self.positions.shape[0]
        expected = {
            "positions": (m, 3), "rotations": (m, 4), "log_scales": (m, 3),
            "opacity_logits": (m,), "color_logits": (m, 3),
        }
        for name, shape in expected.items():
            arr = getattr(self, name)
            if arr.shape != shape:
                raise ValueError(f"{name} has shape {arr.shape}, expected {shape}")

    @property
    def num_splats(self) -> int:
        return self.positions.shape[0]

    @property
    def dtype(self):
        return self.positions.dtype

    def opacities(self) -> np.ndarray:
        return expit(self.opacity_logits)

    def colors(self) -> np.ndarray:
        return expit(self.color_logits)

    def scales(self) -> np.ndarray:
        return np.exp(self.log_scales)

    def covariances(self) -> np.ndarray:
        return build_covariance(self.rotations, self.log_scales)

    def normalize_rotations(self) -> None:
        norms = np.linalg.norm(self.rotations, axis=1, keepdims=True)
        self.rotations /= np.maximum(norms, 1e-12)

    def copy(self) -> "GaussianCloud":
        return GaussianCloud(*(getattr(self, g).copy() for g in PARAM_GROUPS))

    def astype(self, dtype) -> "GaussianCloud":
        return GaussianCloud(*(getattr(self, g).astype(dtype) for g in PARAM_GROUPS))

    @classmethod
    def random(cls, n: int, seed: int = 0, extent: float = 1.0,
               dtype=np.float32) -> "GaussianCloud":
        """Random cloud for tests: positions in a cube, mild scales/opacities."""
        rng = np.random.default_rng(seed)
        q = rng.normal(size=(n, 4))
        q /= np.linalg.norm(q, axis=1, keepdims=True)
        return cls(
            positions=rng.uniform(-extent, extent, size=(n, 3)).astype(dtype),
            rotations=q.astype(dtype),
            log_scales=rng.uniform(-2.5, -0.8, size=(n, 3)).astype(dtype),
            opacity_logits=rng.uniform(-1.5, 1.2, size=n).astype(dtype),
            color_logits=rng.uniform(-1.5, 1.5, size=(n, 3)).astype(dtype),
        )

    # -- persistence ----------------------------------------------------------

    def save_checkpoint(self, path) -> None:
        from .io_utils import atomic_write_bytes
        atomic_write_bytes(path, self.to_checkpoint_bytes())

    def to_checkpoint_bytes(self) -> bytes:
        header = _CKPT_HEADER.pack(CKPT_MAGIC, CKPT_VERSION, 0, self.num_splats)
        blobs = [header]
        for g in PARAM_GROUPS:
            blobs.append(np.ascontiguousarray(getattr(self, g), dtype="<f4").tobytes())
        return b"".join(blobs)

    @classmethod
    def from_checkpoint_bytes(cls, data: bytes) -> "GaussianCloud":
        if len(data) < _CKPT_HEADER.size:
            raise CheckpointError("checkpoint shorter than header")
        magic, version, _, m = _CKPT_HEADER.unpack_from(data)
        if magic != CKPT_MAGIC:
            raise CheckpointError(f"bad checkpoint magic {magic!r}")
        if version != CKPT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        widths = {"positions": 3, "rotations": 4, "log_scales": 3,
                  "opacity_logits": 1, "color_logits": 3}
        need = _CKPT_HEADER.size + 4 * m * sum(widths.values())
        if len(data) != need:
            raise CheckpointError(f"checkpoint size {len(data)}, expected {need}")
        off = _CKPT_HEADER.size
        arrays = {}
        for g in PARAM_GROUPS:
            w = widths[g]
            arr = np.frombuffer(data, dtype="<f4", count=m * w, offset=off).copy()
            arrays[g] = arr.reshape(m, w) if w > 1 else arr
            off += 4 * m * w
        return cls(**arrays)

    @classmethod
    def load_checkpoint(cls, path) -> "GaussianCloud":
        with open(path, "rb") as f:
            return cls.from_checkpoint_bytes(f.read())

    def export_ply(self, path) -> None:
        """Binary PLY with the field layout common splat viewers expect."""
        m = self.num_splats
        sh_c0 = 0.28209479177387814
        f_dc = (self.colors() - 0.5) / sh_c0
        names = (["x", "y", "z", "nx", "ny", "nz"]
                 + [f"f_dc_{i}" for i in range(3)]
                 + ["opacity"]
                 + [f"scale_{i}" for i in range(3)]
                 + [f"rot_{i}" for i in range(4)])
        header = ["ply", "format binary_little_endian 1.0", f"element vertex {m}"]
        header += [f"property float {n}" for n in names]
        header.append("end_header")
        rec = np.zeros((m, len(names)), dtype="<f4")
        rec[:, 0:3] = self.positions
        rec[:, 6:9] = f_dc
        rec[:, 9] = self.opacity_logits
        rec[:, 10:13] = self.log_scales
        rec[:, 13:17] = self.rotations
        with open(path, "wb") as f:
            f.write(("\n".join(header) + "\n").encode("ascii"))
            f.write(rec.tobytes())


def build_covariance(rotation: np.ndarray, log_scale: np.ndarray) -> np.ndarray:
    """World covariance R S S^T R^T for one splat (4,), (3,) or many (M, 4), (M, 3).

    Quaternions are normalized defensively before use; gradients elsewhere
    chain through this normalization.
    """
    q = np.asarray(rotation, dtype=np.float64)
    s = np.asarray(log_scale, dtype=np.float64)
    single = q.ndim == 1
    q = np.atleast_2d(q)
    s = np.atleast_2d(s)
    q = q / np.linalg.norm(q, axis=1, keepdims=True)
    R = quat_to_rot(q)
    d = np.exp(2.0 * s)
    cov = np.einsum("mij,mj,mkj->mik", R, d, R)
    return cov[0] if single else cov


@dataclass
class ProjectedSplats:
    """Screen-space Gaussians for one camera; full-length arrays plus a
    visibility mask (depth and conservative screen-bounds culling)."""

    mean2d: np.ndarray      # (M, 2) pixel coords
    cov2d: np.ndarray       # (M, 3) packed symmetric (a, b, c), dilated
    depth: np.ndarray       # (M,) camera z
    radius: np.ndarray      # (M,) conservative footprint radius in pixels
    visible: np.ndarray     # (M,) bool
    color: np.ndarray       # (M, 3) activated RGB
    alpha: np.ndarray       # (M,) activated base opacity
    cam_xyz: np.ndarray = field(repr=False, default=None)   # (M, 3) camera-frame means
    cov_cam: np.ndarray = field(repr=False, default=None)   # (M, 3, 3) camera-frame cov

    def conic(self) -> np.ndarray:
        """Packed inverse 2D covariance (A, B, C)."""
        a, b, c = self.cov2d[:, 0], self.cov2d[:, 1], self.cov2d[:, 2]
        det = a * c - b * b
        return np.stack([c / det, -b / det, a / det], axis=1)


def project(cloud: GaussianCloud, pose: Pose, intrinsics: Intrinsics,
            near: float = 0.01, dilation: float = 0.3,
            cutoff_weight: float = 1.0 / 255.0) -> ProjectedSplats:
    """Project all splats to screen space.

    A splat is culled when its camera depth is at or below ``near`` or when
    its footprint cannot reach the image. The footprint radius is chosen so
    that any dropped contribution has blended alpha below ``cutoff_weight``.
    """
    V, b = pose.world_to_cam()
    pos = np.asarray(cloud.positions, dtype=np.float64)
    m_cam = pos @ V.T + b
    x, y, z = m_cam[:, 0], m_cam[:, 1], m_cam[:, 2]
    visible = z > near
    z_safe = np.where(visible, z, 1.0)

    fx, fy = intrinsics.fx, intrinsics.fy
    u = fx * x / z_safe + intrinsics.cx
    v = fy * y / z_safe + intrinsics.cy
    mean2d = np.stack([u, v], axis=1)

    cov_world = cloud.covariances()
    cov_cam = np.einsum("ij,mjk,lk->mil", V, cov_world, V)

    j00 = fx / z_safe
    j02 = -fx * x / z_safe**2
    j11 = fy / z_safe
    j12 = -fy * y / z_safe**2
    # cov2d = J Sigma_cam J^T with J = [[j00, 0, j02], [0, j11, j12]]
    c00 = cov_cam[:, 0, 0]
    c01 = cov_cam[:, 0, 1]
    c02 = cov_cam[:, 0, 2]
    c11 = cov_cam[:, 1, 1]
    c12 = cov_cam[:, 1, 2]
    c22 = cov_cam[:, 2, 2]
    a = j00 * (j00 * c00 + j02 * c02) + j02 * (j00 * c02 + j02 * c22) + dilation
    bb = j00 * (j11 * c01 + j12 * c02) + j02 * (j11 * c12 + j12 * c22)
    c = j11 * (j11 * c11 + j12 * c12) + j12 * (j11 * c12 + j12 * c22) + dilation
    cov2d = np.stack([a, bb, c], axis=1)

    alpha = expit(np.asarray(cloud.opacity_logits, dtype=np.float64))
    color = expit(np.asarray(cloud.color_logits, dtype=np.float64))

    eig_max = 0.5 * (a + c) + np.sqrt(np.maximum(0.25 * (a - c) ** 2 + bb * bb, 0.0))
    log_ratio = np.log(np.maximum(alpha, 1e-300)) - np.log(cutoff_weight)
    radius = np.sqrt(np.maximum(2.0 * log_ratio, 0.0) * np.maximum(eig_max, 0.0))
    visible &= radius > 0.0
    visible &= (u + radius > 0.0) & (u - radius < intrinsics.width)
    visible &= (v + radius > 0.0) & (v - radius < intrinsics.height)

    return ProjectedSplats(mean2d=mean2d, cov2d=cov2d, depth=z, radius=radius,
                           visible=visible, color=color, alpha=alpha,
                           cam_xyz=m_cam, cov_cam=cov_cam)


def eval_gaussian2d(mean2d: np.ndarray, cov2d: np.ndarray, pixel) -> np.ndarray:
    """Gaussian weight exp(-0.5 d^T cov2d^-1 d) at ``pixel``; full support, in (0, 1].

    ``mean2d`` (2,), ``cov2d`` packed (3,); ``pixel`` a 2-vector or (..., 2).
    """
    mean2d = np.asarray(mean2d, dtype=np.float64)
    a, b, c = (float(v) for v in cov2d)
    det = a * c - b * b
    ca, cb, cc = c / det, -b / det, a / det
    d = np.asarray(pixel, dtype=np.float64) - mean2d
    dx, dy = d[..., 0], d[..., 1]
    power = -0.5 * (ca * dx * dx + cc * dy * dy) - cb * dx * dy
    return np.exp(np.minimum(power, 0.0))
