"""Intensity reconstruction from spike windows.

Two estimators:

* playback accumulation: threshold / window_length * spike_count, the
  time-average intensity over a window. Sharp for static content, blurred
  under motion. The estimate is always within threshold/window_length of the
  true mean radiance over the window.
* interval: threshold / (t2 - t1) from the gap between two adjacent spikes
  bracketing a reference time. Temporally sharp but undefined where a pixel
  fired fewer than twice, and noisy for long gaps.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .stream import SpikeStream

DEFAULT_MAX_INTERVAL = 64


@dataclass
class IntervalImage:
    """Per-pixel interval intensity estimate at a reference frame time.

    Invalid pixels (no bracketing spike pair, or a gap longer than the
    configured cap) carry value 0 and must be masked out of any loss.
    ``mid_time`` is the per-pixel midpoint (t1 + t2) / 2 in frame units.
    """

    values: np.ndarray
    valid: np.ndarray
    mid_time: np.ndarray
    ref_time: float

    @property
    def num_valid(self) -> int:
        return int(self.valid.sum())

    def median_mid_time(self) -> float:
        if not self.valid.any():
            raise ValueError("interval image has no valid pixels")
        return float(np.median(self.mid_time[self.valid]))


def tfp(stream: SpikeStream, t0: int, t1: int) -> np.ndarray:
    """Accumulation estimate over frames [t0, t1] inclusive, (H, W) float64."""
    if not (0 <= t0 <= t1 < stream.num_frames):
        raise IndexError(f"window [{t0}, {t1}] invalid for {stream.num_frames} frames")
    n_w = t1 - t0 + 1
    counts = stream.spike_counts(t0, t1).astype(np.float64)
    return stream.threshold * counts / n_w


def tfi(stream: SpikeStream, t_ref: int,
        max_interval: int = DEFAULT_MAX_INTERVAL) -> IntervalImage:
    """Interval estimate referenced at frame ``t_ref``.

    Per pixel: take the latest spike at t1 <= t_ref and the next spike after
    it; since t1 is the latest spike not beyond the reference, the partner is
    the first spike strictly after t_ref. Pixels without such a pair, or with
    a gap above ``max_interval``, are invalid.
    """
    if not 0 <= t_ref < stream.num_frames:
        raise IndexError(f"t_ref={t_ref} out of range for {stream.num_frames} frames")
    dense = stream.to_dense().astype(bool)
    before = dense[: t_ref + 1]
    after = dense[t_ref + 1 :]

    has_t1 = before.any(axis=0)
    # Latest spike at or before the reference.
    t1 = t_ref - np.argmax(before[::-1], axis=0)
    has_t2 = after.any(axis=0) if after.shape[0] else np.zeros_like(has_t1)
    t2 = t_ref + 1 + np.argmax(after, axis=0) if after.shape[0] else np.zeros_like(t1)

    valid = has_t1 & has_t2
    gap = np.where(valid, t2 - t1, 1)
    valid &= gap <= max_interval
    values = np.where(valid, stream.threshold / gap, 0.0)
    mid = np.where(valid, 0.5 * (t1 + t2), 0.0)
    return IntervalImage(values=values, valid=valid, mid_time=mid, ref_time=float(t_ref))


def interval_supervision_set(stream: SpikeStream, num_targets: int,
                             seed: int | None = None,
                             max_interval: int = DEFAULT_MAX_INTERVAL) -> list[IntervalImage]:
    """Interval images at ``num_targets`` reference times spread evenly over
    the stream, optionally jittered (strict ordering is preserved)."""
    if num_targets < 1:
        raise ValueError("num_targets must be >= 1")
    n = stream.num_frames
    centers = (np.arange(num_targets) + 0.5) / num_targets * (n - 1)
    if seed is not None and num_targets > 1:
        spacing = (n - 1) / num_targets
        rng = np.random.default_rng(seed)
        centers = centers + rng.uniform(-0.25, 0.25, size=num_targets) * spacing
    refs = np.clip(np.round(centers).astype(int), 0, n - 1)
    # Keep reference times strictly increasing even after rounding.
    for i in range(1, num_targets):
        if refs[i] <= refs[i - 1]:
            refs[i] = min(refs[i - 1] + 1, n - 1)
    return [tfi(stream, int(r), max_interval=max_interval) for r in refs]
