"""Training objectives: photometric losses against spike reconstructions.

Both losses compare the luminance of a rendered RGB image against a
single-channel spike-derived target (the spike sensor is monochrome):

* accumulation loss: blurred accumulation render vs playback accumulation
  image over the same window,
* interval loss: mid-interval render vs interval image, restricted to the
  interval image's valid pixels.

Each is (1 - lambda1) * error_norm + lambda1 * (1 - SSIM). The error norm
is mean squared error by default (L1 available). The structural term uses
the standard 11x11 Gaussian window (sigma 1.5, K1 0.01, K2 0.03, unit
dynamic range) and is dropped, with the remaining term kept, when no window
fits (image smaller than the window, or a mask leaves no usable window).

A combined schedule ramps the accumulation loss in from zero while the
interval loss decays to a floor, so interval supervision dominates early
training and accumulation supervision dominates late training.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import correlate1d

SSIM_WINDOW = 11
_SSIM_MARGIN = SSIM_WINDOW // 2
_K1 = 0.01
_K2 = 0.03
_C1 = (_K1 * 1.0) ** 2
_C2 = (_K2 * 1.0) ** 2
MIN_WINDOW_WEIGHT = 0.1


def _gaussian_taps(n: int = SSIM_WINDOW, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(n) - (n - 1) / 2.0
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()

_TAPS = _gaussian_taps()


def _conv_valid(img: np.ndarray) -> np.ndarray:
    c = correlate1d(img, _TAPS, axis=0, mode="constant")
    c = correlate1d(c, _TAPS, axis=1, mode="constant")
    return c[_SSIM_MARGIN:-_SSIM_MARGIN, _SSIM_MARGIN:-_SSIM_MARGIN]


def _conv_valid_adjoint(grad: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    full = np.zeros(shape, dtype=np.float64)
    full[_SSIM_MARGIN:-_SSIM_MARGIN, _SSIM_MARGIN:-_SSIM_MARGIN] = grad
    c = correlate1d(full, _TAPS, axis=0, mode="constant")
    return correlate1d(c, _TAPS, axis=1, mode="constant")


def _fits_window(shape: tuple[int, int]) -> bool:
    return shape[0] >= SSIM_WINDOW and shape[1] >= SSIM_WINDOW


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Mean local SSIM of two same-shape images in [0, 1]."""
    value, _ = ssim_with_grad(a, b)
    return value


def ssim_with_grad(a: np.ndarray, b: np.ndarray) -> tuple[float, np.ndarray]:
    """SSIM plus its gradient with respect to ``a``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if a.ndim != 2:
        raise ValueError("ssim expects 2-D images")
    if not _fits_window(a.shape):
        raise ValueError(f"image smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window")

    mu_a = _conv_valid(a)
    mu_b = _conv_valid(b)
    e_aa = _conv_valid(a * a)
    e_bb = _conv_valid(b * b)
    e_ab = _conv_valid(a * b)
    var_a = e_aa - mu_a * mu_a
    var_b = e_bb - mu_b * mu_b
    cov = e_ab - mu_a * mu_b

    n1 = 2 * mu_a * mu_b + _C1
    n2 = 2 * cov + _C2
    d1 = mu_a * mu_a + mu_b * mu_b + _C1
    d2 = var_a + var_b + _C2
    s_map = (n1 * n2) / (d1 * d2)
    value = float(s_map.mean())

    g = 1.0 / s_map.size
    inv_dd = g / (d1 * d2)
    dn1 = n2 * inv_dd
    dn2 = n1 * inv_dd
    dd1 = -g * s_map / d1
    dd2 = -g * s_map / d2
    dmu_a = 2 * mu_b * dn1 + 2 * mu_a * dd1
    dcov = 2 * dn2
    dvar_a = dd2
    # var/cov decompose into windowed raw moments minus mean products.
    de_aa = dvar_a
    dmu_a = dmu_a - 2 * mu_a * dvar_a - mu_b * dcov
    de_ab = dcov
    grad = (_conv_valid_adjoint(dmu_a, a.shape)
            + 2 * a * _conv_valid_adjoint(de_aa, a.shape)
            + b * _conv_valid_adjoint(de_ab, a.shape))
    return value, grad


def masked_ssim_with_grad(a: np.ndarray, b: np.ndarray, mask: np.ndarray
                          ) -> tuple[float, np.ndarray] | None:
    """SSIM over valid pixels with window weights renormalized to the mask.

    Windows whose in-mask weight falls below ``MIN_WINDOW_WEIGHT`` are
    skipped; returns None when no window survives.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    m = np.asarray(mask, dtype=np.float64)
    if not (a.shape == b.shape == m.shape):
        raise ValueError("shape mismatch between images and mask")
    if not _fits_window(a.shape):
        return None
    w0 = _conv_valid(m)
    usable = w0 >= MIN_WINDOW_WEIGHT
    if not usable.any():
        return None
    w0_safe = np.where(usable, w0, 1.0)

    mu_a = _conv_valid(m * a) / w0_safe
    mu_b = _conv_valid(m * b) / w0_safe
    e_aa = _conv_valid(m * a * a) / w0_safe
    e_bb = _conv_valid(m * b * b) / w0_safe
    e_ab = _conv_valid(m * a * b) / w0_safe
    var_a = e_aa - mu_a * mu_a
    var_b = e_bb - mu_b * mu_b
    cov = e_ab - mu_a * mu_b

    n1 = 2 * mu_a * mu_b + _C1
    n2 = 2 * cov + _C2
    d1 = mu_a * mu_a + mu_b * mu_b + _C1
    d2 = var_a + var_b + _C2
    s_map = (n1 * n2) / (d1 * d2)
    count = int(usable.sum())
    value = float(s_map[usable].sum() / count)

    g = np.where(usable, 1.0 / count, 0.0)
    inv_dd = g / (d1 * d2)
    dn1 = n2 * inv_dd
    dn2 = n1 * inv_dd
    dd1 = -g * s_map / d1
    dd2 = -g * s_map / d2
    dmu_a = 2 * mu_b * dn1 + 2 * mu_a * dd1
    dcov = 2 * dn2
    dvar_a = dd2
    de_aa = dvar_a
    dmu_a = dmu_a - 2 * mu_a * dvar_a - mu_b * dcov
    de_ab = dcov
    shape = a.shape
    grad = m * (_conv_valid_adjoint(dmu_a / w0_safe, shape)
                + 2 * a * _conv_valid_adjoint(de_aa / w0_safe, shape)
                + b * _conv_valid_adjoint(de_ab / w0_safe, shape))
    return value, grad


# -- photometric losses -------------------------------------------------------

def _luminance_and_chain(pixels: np.ndarray) -> np.ndarray:
    if pixels.ndim == 3:
        return pixels.mean(axis=2)
    return pixels


def _spread_to_channels(d_lum: np.ndarray, pixels: np.ndarray) -> np.ndarray:
    if pixels.ndim == 3:
        return np.repeat(d_lum[:, :, None] / 3.0, 3, axis=2)
    return d_lum


def accumulation_loss(pixels: np.ndarray, target: np.ndarray,
                      lambda1: float = 0.2, norm: str = "mse"
                      ) -> tuple[float, np.ndarray]:
    """Photometric + structural loss between a rendered image and an
    accumulation target; returns (loss, gradient w.r.t. pixels)."""
    lum = _luminance_and_chain(np.asarray(pixels, dtype=np.float64))
    target = np.asarray(target, dtype=np.float64)
    if lum.shape != target.shape:
        raise ValueError(f"shape mismatch {lum.shape} vs {target.shape}")
    diff = lum - target
    p = diff.size
    if norm == "mse":
        base = float(np.mean(diff * diff))
        d_lum = (1.0 - lambda1) * 2.0 * diff / p
    elif norm == "l1":
        base = float(np.mean(np.abs(diff)))
        d_lum = (1.0 - lambda1) * np.sign(diff) / p
    else:
        raise ValueError("norm must be 'mse' or 'l1'")
    loss = (1.0 - lambda1) * base
    if lambda1 > 0 and _fits_window(lum.shape):
        s, ds = ssim_with_grad(lum, target)
        loss += lambda1 * (1.0 - s)
        d_lum = d_lum - lambda1 * ds
    return loss, _spread_to_channels(d_lum, np.asarray(pixels))


def interval_loss(pixels: np.ndarray, values: np.ndarray, valid: np.ndarray,
                  lambda1: float = 0.2, norm: str = "mse"
                  ) -> tuple[float, np.ndarray]:
    """Masked photometric + structural loss against an interval image.

    Invalid pixels contribute nothing to either term and receive zero
    gradient. The SSIM term drops out when the mask leaves no usable window.
    """
    lum = _luminance_and_chain(np.asarray(pixels, dtype=np.float64))
    values = np.asarray(values, dtype=np.float64)
    valid = np.asarray(valid, dtype=bool)
    if lum.shape != values.shape or lum.shape != valid.shape:
        raise ValueError("shape mismatch between image, target and mask")
    n_valid = int(valid.sum())
    if n_valid == 0:
        raise ValueError("interval target has an empty valid mask")
    diff = np.where(valid, lum - values, 0.0)
    if norm == "mse":
        base = float((diff * diff).sum() / n_valid)
        d_lum = (1.0 - lambda1) * 2.0 * diff / n_valid
    elif norm == "l1":
        base = float(np.abs(diff).sum() / n_valid)
        d_lum = (1.0 - lambda1) * np.sign(diff) / n_valid
    else:
        raise ValueError("norm must be 'mse' or 'l1'")
    loss = (1.0 - lambda1) * base
    if lambda1 > 0:
        res = masked_ssim_with_grad(lum, values, valid)
        if res is not None:
            s, ds = res
            loss += lambda1 * (1.0 - s)
            d_lum = d_lum - lambda1 * ds
    d_lum = np.where(valid, d_lum, 0.0)
    return loss, _spread_to_channels(d_lum, np.asarray(pixels))


# -- schedules ----------------------------------------------------------------

@dataclass(frozen=True)
class LossWeights:
    """SSIM mixing weight plus the accumulation/interval schedules.

    The accumulation weight ramps linearly 0 -> 1 over the first
    ``accu_ramp_frac`` of training and stays at 1; the interval weight holds
    at 1, then decays linearly to ``in_floor`` between the two decay
    fractions and is held there.
    """

    total_iterations: int
    lambda1: float = 0.2
    accu_ramp_frac: float = 0.3
    in_decay_start_frac: float = 0.3
    in_decay_end_frac: float = 0.8
    in_floor: float = 0.1

    def __post_init__(self):
        if not 0.0 <= self.lambda1 <= 1.0:
            raise ValueError("lambda1 must be in [0, 1]")
        if self.in_floor < 0:
            raise ValueError("in_floor must be >= 0")
        if not 0 < self.accu_ramp_frac <= 1:
            raise ValueError("accu_ramp_frac must be in (0, 1]")
        if not 0 <= self.in_decay_start_frac < self.in_decay_end_frac <= 1:
            raise ValueError("interval decay fractions must satisfy 0 <= start < end <= 1")

    def lambda_accu(self, iteration: int) -> float:
        ramp = self.accu_ramp_frac * self.total_iterations
        if iteration >= ramp:
            return 1.0
        return iteration / ramp

    def lambda_in(self, iteration: int) -> float:
        start = self.in_decay_start_frac * self.total_iterations
        end = self.in_decay_end_frac * self.total_iterations
        if iteration <= start:
            return 1.0
        if iteration >= end:
            return self.in_floor
        f = (iteration - start) / (end - start)
        return 1.0 + f * (self.in_floor - 1.0)


def combined_loss(iteration: int, loss_accu: float, loss_in: float,
                  weights: LossWeights) -> float:
    return (weights.lambda_accu(iteration) * loss_accu
            + weights.lambda_in(iteration) * loss_in)


class LossLog:
    """Appends per-iteration loss curves to a CSV file."""

    FIELDS = ("iter", "loss_accu", "loss_in", "lambda_accu", "lambda_in", "total")

    def __init__(self, path):
        self.path = Path(path)
        if not self.path.exists():
            with open(self.path, "w", newline="") as f:
                csv.writer(f).writerow(self.FIELDS)

    def append(self, iteration: int, loss_accu: float, loss_in: float,
               lam_accu: float, lam_in: float, total: float) -> None:
        with open(self.path, "a", newline="") as f:
            csv.writer(f).writerow(
                [iteration, f"{loss_accu:.8g}", f"{loss_in:.8g}",
                 f"{lam_accu:.6g}", f"{lam_in:.6g}", f"{total:.8g}"])
