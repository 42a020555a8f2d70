"""Float image helpers and 8-bit PNG round-tripping."""

from __future__ import annotations

import numpy as np
from PIL import Image as PILImage

from .errors import InvalidArgumentError


def to_u8(img) -> np.ndarray:
    img = np.asarray(img)
    return np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)


def from_u8(arr) -> np.ndarray:
    return np.asarray(arr, dtype=np.float64) / 255.0


def save_png(path, img) -> None:
    """img: float (H, W, 3) in [0, 1]."""
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3:
        raise InvalidArgumentError("save_png: expected (H, W, 3)")
    PILImage.fromarray(to_u8(img), mode="RGB").save(path)


def load_png(path) -> np.ndarray:
    with PILImage.open(path) as im:
        return from_u8(np.asarray(im.convert("RGB")))
