"""Small image/file helpers shared by the CLI and dataset code."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image


def save_gray_png(path, img) -> None:
    """Write an (H, W) float image in [0, 1] as 8-bit grayscale PNG."""
    arr = np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0)
    Image.fromarray(np.round(arr * 255.0).astype(np.uint8), mode="L").save(path)


def load_gray_png(path) -> np.ndarray:
    img = Image.open(path).convert("L")
    return np.asarray(img, dtype=np.float32) / 255.0


def save_image_with_sidecar(path, img) -> None:
    """8-bit PNG for inspection plus an .npy float sidecar for exact reads."""
    path = Path(path)
    save_gray_png(path, img)
    np.save(path.with_suffix(".npy"), np.asarray(img, dtype=np.float32))


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(data)
    tmp.replace(path)
