"""Integrate-and-fire spike camera simulator.

Each pixel accumulates incoming radiance once per readout interval. When the
accumulator crosses the firing threshold a binary spike is emitted and the
threshold is subtracted (reset by subtraction, so flux is conserved). One
input frame corresponds to one readout interval with unit integration time.

Radiance is restricted to [0, 1] and the threshold must be at least the peak
radiance so a pixel can fire at most once per readout; the binary stream
format cannot represent multiple spikes in one interval.

Optional noise (off by default): a constant dark current added to the input
every readout, and per-pixel Gaussian jitter of the firing threshold,
redrawn each frame. Both are driven by a seeded generator so simulation is
reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .stream import SpikeStream


@dataclass(frozen=True)
class SensorConfig:
    threshold: float = 1.0
    readout_period_us: float = 25.0
    noise_enabled: bool = False
    dark_current: float = 0.0
    threshold_jitter_std: float = 0.0
    rng_seed: int = 0

    def __post_init__(self):
        if not self.threshold > 0:
            raise ValueError("threshold must be > 0")
        if not self.readout_period_us > 0:
            raise ValueError("readout_period_us must be > 0")
        if self.dark_current < 0:
            raise ValueError("dark_current must be >= 0")
        if not 0.0 <= self.threshold_jitter_std <= 0.5:
            raise ValueError("threshold_jitter_std must be in [0, 0.5]")


@dataclass
class AccumulatorState:
    """Per-pixel residual accumulation plus the noise RNG.

    With noise off the residual stays in [0, threshold) after every readout.
    """

    residual: np.ndarray
    rng: np.random.Generator = field(repr=False, default=None)

    @classmethod
    def initial(cls, height: int, width: int, config: SensorConfig) -> "AccumulatorState":
        rng = np.random.default_rng(config.rng_seed) if config.noise_enabled else None
        return cls(residual=np.zeros((height, width), dtype=np.float64), rng=rng)


def _check_frame(frame: np.ndarray, config: SensorConfig) -> np.ndarray:
    frame = np.asarray(frame, dtype=np.float64)
    if frame.ndim != 2:
        raise ValueError("radiance frame must be 2-D (H, W)")
    if not np.all(np.isfinite(frame)):
        raise ValueError("radiance frame contains non-finite values")
    if frame.min() < 0:
        raise ValueError("radiance must be >= 0")
    peak = frame.max()
    if peak > 1.0 + 1e-12:
        raise ValueError(f"radiance must be <= 1, got max {peak:g}")
    if config.threshold < peak:
        raise ValueError(
            f"threshold {config.threshold:g} below peak radiance {peak:g}: "
            "would require more than one spike per readout"
        )
    return frame


def step(state: AccumulatorState, frame: np.ndarray,
         config: SensorConfig) -> tuple[AccumulatorState, np.ndarray]:
    """Integrate one readout interval; returns the new state and a binary frame."""
    frame = _check_frame(frame, config)
    if frame.shape != state.residual.shape:
        raise ValueError(
            f"frame shape {frame.shape} does not match accumulator {state.residual.shape}"
        )
    residual = state.residual + frame
    thresh = config.threshold
    if config.noise_enabled:
        if config.dark_current > 0:
            residual = residual + config.dark_current
        if config.threshold_jitter_std > 0:
            jitter = state.rng.normal(0.0, config.threshold_jitter_std, size=frame.shape)
            thresh = config.threshold * (1.0 + np.clip(jitter, -0.5, 0.5))
    spikes = residual >= thresh
    residual = np.where(spikes, residual - thresh, residual)
    new_state = AccumulatorState(residual=residual, rng=state.rng)
    return new_state, spikes.astype(np.uint8)


def simulate_with_residual(frames, config: SensorConfig) -> tuple[SpikeStream, np.ndarray]:
    """Like :func:`simulate` but also returns the final per-pixel residual."""
    frames = list(frames)
    if not frames:
        raise ValueError("need at least one radiance frame")
    first = np.asarray(frames[0])
    if first.ndim != 2:
        raise ValueError("radiance frames must be 2-D (H, W)")
    h, w = first.shape
    state = AccumulatorState.initial(h, w, config)
    out = np.empty((len(frames), h, w), dtype=np.uint8)
    for t, frame in enumerate(frames):
        frame = np.asarray(frame)
        if frame.shape != (h, w):
            raise ValueError(
                f"frame {t} has shape {frame.shape}, expected {(h, w)}"
            )
        state, out[t] = step(state, frame, config)
    stream = SpikeStream.from_dense(out, config.threshold, config.readout_period_us)
    return stream, state.residual


def simulate(frames, config: SensorConfig) -> SpikeStream:
    """Run the integrate-and-fire model over a radiance sequence.

    ``frames`` is an iterable of same-shaped (H, W) arrays in [0, 1]; the
    output stream has one binary frame per input frame.
    """
    return simulate_with_residual(frames, config)[0]
