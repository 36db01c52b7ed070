"""Bit-packed spatio-temporal binary spike streams and the SPKS file codec.

A spike stream is an H x W x N binary tensor: one bit per pixel per readout
interval. Bits are stored frame-major, row-major, MSB-first, with every frame
padded to a whole number of bytes so random access to a frame is O(1).

SPKS file layout (little-endian)::

    magic  "SPKS"        4 bytes
    version u16 = 1
    reserved u16 = 0
    height  u32
    width   u32
    num_frames u32
    threshold f32          luminance units per spike
    readout_period_us f32
    payload: num_frames frames, each ceil(H*W/8) bytes, row-major, MSB-first

Streams are immutable after construction and safe to share across threads.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

MAGIC = b"SPKS"
VERSION = 1
_HEADER = struct.Struct("<4sHHIIIff")
HEADER_SIZE = _HEADER.size  # 28


class SpikeFormatError(ValueError):
    """Malformed SPKS data."""


class BadMagicError(SpikeFormatError):
    pass


class UnsupportedVersionError(SpikeFormatError):
    pass


class TruncatedPayloadError(SpikeFormatError):
    pass


def frame_bytes(height: int, width: int) -> int:
    """Bytes per packed frame, including the zero pad up to a byte boundary."""
    return (height * width + 7) // 8


@dataclass(frozen=True, eq=False)
class SpikeStream:
    """Immutable bit-packed spike stream with sensor metadata.

    ``packed`` has shape (num_frames, frame_bytes); pad bits in the last byte
    of each frame are forced to zero on construction.
    """

    height: int
    width: int
    num_frames: int
    threshold: float
    readout_period_us: float
    packed: np.ndarray = field(repr=False)

    def __post_init__(self):
        if self.height < 1 or self.width < 1 or self.num_frames < 1:
            raise ValueError("height, width and num_frames must all be >= 1")
        if not self.threshold > 0:
            raise ValueError("threshold must be > 0")
        if not self.readout_period_us > 0:
            raise ValueError("readout_period_us must be > 0")
        # Header fields are f32; round on construction so encode/decode is an
        # exact identity.
        object.__setattr__(self, "threshold", float(np.float32(self.threshold)))
        object.__setattr__(self, "readout_period_us", float(np.float32(self.readout_period_us)))
        fb = frame_bytes(self.height, self.width)
        packed = np.ascontiguousarray(self.packed, dtype=np.uint8)
        if packed.shape != (self.num_frames, fb):
            raise ValueError(
                f"packed bits have shape {packed.shape}, "
                f"expected ({self.num_frames}, {fb})"
            )
        pad = fb * 8 - self.height * self.width
        if pad:
            packed = packed.copy()
            packed[:, -1] &= np.uint8(0xFF << pad)
        packed.flags.writeable = False
        object.__setattr__(self, "packed", packed)

    # -- construction -------------------------------------------------------

    @classmethod
    def from_dense(cls, dense, threshold: float, readout_period_us: float) -> "SpikeStream":
        """Pack a dense (N, H, W) {0,1} array into a stream."""
        dense = np.asarray(dense)
        if dense.ndim != 3:
            raise ValueError("dense spike array must have shape (N, H, W)")
        n, h, w = dense.shape
        bits = (dense != 0).astype(np.uint8).reshape(n, h * w)
        packed = np.packbits(bits, axis=1)
        return cls(h, w, n, float(threshold), float(readout_period_us), packed)

    @classmethod
    def zeros(cls, height: int, width: int, num_frames: int,
              threshold: float = 1.0, readout_period_us: float = 25.0) -> "SpikeStream":
        packed = np.zeros((num_frames, frame_bytes(height, width)), dtype=np.uint8)
        return cls(height, width, num_frames, threshold, readout_period_us, packed)

    # -- access -------------------------------------------------------------

    def to_dense(self) -> np.ndarray:
        """Unpack to a (N, H, W) uint8 array of 0/1."""
        flat = np.unpackbits(self.packed, axis=1)[:, : self.height * self.width]
        return flat.reshape(self.num_frames, self.height, self.width)

    def get_spike(self, x: int, y: int, t: int) -> int:
        """Read a single bit at column ``x``, row ``y``, frame ``t``."""
        if not 0 <= x < self.width:
            raise IndexError(f"x={x} out of range for width {self.width}")
        if not 0 <= y < self.height:
            raise IndexError(f"y={y} out of range for height {self.height}")
        if not 0 <= t < self.num_frames:
            raise IndexError(f"t={t} out of range for num_frames {self.num_frames}")
        idx = y * self.width + x
        byte = self.packed[t, idx >> 3]
        return (int(byte) >> (7 - (idx & 7))) & 1

    def spike_counts(self, t0: int = 0, t1: int | None = None) -> np.ndarray:
        """Per-pixel spike count over frames [t0, t1] inclusive, as int32."""
        if t1 is None:
            t1 = self.num_frames - 1
        self._check_window(t0, t1)
        flat = np.unpackbits(self.packed[t0 : t1 + 1], axis=1)[:, : self.height * self.width]
        return flat.sum(axis=0, dtype=np.int32).reshape(self.height, self.width)

    def total_spikes(self) -> int:
        return int(self.spike_counts().sum())

    def slice_window(self, t0: int, t1: int) -> "SpikeStream":
        """Frames [t0, t1] inclusive, metadata copied."""
        self._check_window(t0, t1)
        return SpikeStream(
            self.height, self.width, t1 - t0 + 1,
            self.threshold, self.readout_period_us,
            self.packed[t0 : t1 + 1],
        )

    def _check_window(self, t0: int, t1: int) -> None:
        if not (0 <= t0 <= t1 < self.num_frames):
            raise IndexError(
                f"window [{t0}, {t1}] invalid for num_frames {self.num_frames}"
            )

    # -- codec ---------------------------------------------------------------

    def encode(self) -> bytes:
        header = _HEADER.pack(
            MAGIC, VERSION, 0,
            self.height, self.width, self.num_frames,
            np.float32(self.threshold), np.float32(self.readout_period_us),
        )
        return header + self.packed.tobytes()

    @classmethod
    def decode(cls, data: bytes) -> "SpikeStream":
        if len(data) < HEADER_SIZE:
            raise TruncatedPayloadError(
                f"need at least {HEADER_SIZE} header bytes, got {len(data)}"
            )
        magic, version, _, h, w, n, thresh, period = _HEADER.unpack_from(data)
        if magic != MAGIC:
            raise BadMagicError(f"bad magic {magic!r}, expected {MAGIC!r}")
        if version != VERSION:
            raise UnsupportedVersionError(f"unsupported SPKS version {version}")
        if h < 1 or w < 1 or n < 1:
            raise SpikeFormatError(f"invalid dimensions H={h} W={w} N={n}")
        if not (thresh > 0 and period > 0):
            raise SpikeFormatError("threshold and readout period must be positive")
        fb = frame_bytes(h, w)
        expected = HEADER_SIZE + n * fb
        if len(data) < expected:
            raise TruncatedPayloadError(
                f"payload truncated: expected {n * fb} bytes, got {len(data) - HEADER_SIZE}"
            )
        if len(data) > expected:
            raise SpikeFormatError(f"{len(data) - expected} trailing bytes after payload")
        packed = np.frombuffer(data, dtype=np.uint8, offset=HEADER_SIZE).reshape(n, fb)
        return cls(h, w, n, float(thresh), float(period), packed)

    def save(self, path) -> None:
        with open(path, "wb") as f:
            f.write(self.encode())

    @classmethod
    def load(cls, path) -> "SpikeStream":
        with open(path, "rb") as f:
            return cls.decode(f.read())

    # -- misc ----------------------------------------------------------------

    def __eq__(self, other) -> bool:
        if not isinstance(other, SpikeStream):
            return NotImplemented
        return (
            self.height == other.height
            and self.width == other.width
            and self.num_frames == other.num_frames
            and self.threshold == other.threshold
            and self.readout_period_us == other.readout_period_us
            and np.array_equal(self.packed, other.packed)
        )

    def __repr__(self) -> str:
        return (
            f"SpikeStream({self.height}x{self.width}x{self.num_frames}, "
            f"threshold={self.threshold:g}, readout={self.readout_period_us:g}us)"
        )
