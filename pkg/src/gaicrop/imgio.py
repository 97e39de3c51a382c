"""Single decode/encode seam for image files (PNG and PPM only)."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image


class ImageIOError(ValueError):
    pass


def load_image(path) -> np.ndarray:
    """Read a PNG/PPM file as float64 HxWx3 in [0, 1]."""
    path = Path(path)
    if path.suffix.lower() not in (".png", ".ppm"):
        raise ImageIOError(f"unsupported image format: {path.suffix}")
    with Image.open(path) as img:
        arr = np.asarray(img.convert("RGB"), dtype=np.float64) / 255.0
    return arr


def save_image(path, pixels: np.ndarray):
    """Write float64 HxWx3 in [0, 1] as PNG/PPM."""
    path = Path(path)
    if path.suffix.lower() not in (".png", ".ppm"):
        raise ImageIOError(f"unsupported image format: {path.suffix}")
    if pixels.ndim != 3 or pixels.shape[2] != 3:
        raise ImageIOError(f"expected HxWx3 pixels, got shape {pixels.shape}")
    data = np.clip(np.floor(pixels * 255.0 + 0.5), 0, 255).astype(np.uint8)
    Image.fromarray(data).save(path)
