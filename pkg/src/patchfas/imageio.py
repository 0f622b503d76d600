"""Binary PGM/PPM reading and writing (maxval 255, linear to [0, 1])."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

from .errors import MissingFileError, ValidationError


def quantize(image) -> np.ndarray:
    img = np.asarray(image, dtype=np.float64)
    return np.clip(np.floor(img * 255.0 + 0.5), 0, 255).astype(np.uint8)


def write_image(path, image) -> None:
    img = quantize(image)
    if img.ndim == 3 and img.shape[2] == 1:
        img = img[:, :, 0]
    if img.ndim not in (2, 3):
        raise ValidationError(f"cannot write image of shape {img.shape}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(img, mode="L" if img.ndim == 2 else "RGB").save(path, format="PPM")


def read_image(path, dtype=np.float64) -> np.ndarray:
    """Load a PGM/PPM as (H, W, C) floats in [0, 1]."""
    path = Path(path)
    if not path.exists():
        raise MissingFileError(f"image not found: {path}")
    with Image.open(path) as im:
        if im.mode not in ("L", "RGB"):
            im = im.convert("RGB" if len(im.getbands()) >= 3 else "L")
        arr = np.asarray(im)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    return (arr.astype(np.float64) / 255.0).astype(dtype)
