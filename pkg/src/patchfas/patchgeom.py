"""Patch extraction without resampling distortions.

Training views come from a horizontal flip, a small rotation and a
fixed-size crop; nothing is ever rescaled. Test-time patches are cropped
on a uniform grid of centers.

Images are float arrays of shape (H, W, C) with C in {1, 3} and values in
[0, 1].
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import GeometryError


def as_image(pixels) -> np.ndarray:
    """Validate an image array and return it as (H, W, C)."""
    img = np.asarray(pixels)
    if img.ndim == 2:
        img = img[:, :, None]
    if img.ndim != 3 or img.shape[2] not in (1, 3):
        raise GeometryError(f"expected (H, W) or (H, W, 1|3) image, got shape {img.shape}")
    if not np.issubdtype(img.dtype, np.floating):
        raise GeometryError(f"image must be floating point, got {img.dtype}")
    if img.size and (img.min() < 0.0 or img.max() > 1.0):
        raise GeometryError("pixel values must lie in [0, 1]")
    return img


@dataclass(frozen=True)
class AugmentationConfig:
    patch_size: int = 160
    flip_probability: float = 0.5
    rotation_range: float = 10.0  # degrees, uniform in [-range, +range]

    def __post_init__(self):
        if self.patch_size <= 0:
            raise GeometryError("patch_size must be positive")
        if self.rotation_range < 0:
            raise GeometryError("rotation_range must be non-negative")
        if not 0.0 <= self.flip_probability <= 1.0:
            raise GeometryError("flip_probability must be in [0, 1]")


@dataclass
class PatchView:
    pixels: np.ndarray
    source_id: str = ""
    flipped: bool = False
    angle: float = 0.0
    origin: tuple[int, int] = (0, 0)  # (x, y) of the top-left pixel in the rotated frame
    extra: dict = field(default_factory=dict)

    @property
    def size(self) -> int:
        return self.pixels.shape[0]


def inscribed_rect(width: float, height: float, angle_deg: float) -> tuple[float, float]:
    """Largest-area axis-aligned rectangle inside a rotated ``width x height`` box."""
    if width <= 0 or height <= 0:
        return 0.0, 0.0
    a = math.radians(angle_deg)
    sin_a, cos_a = abs(math.sin(a)), abs(math.cos(a))
    long_side, short_side = (width, height) if width >= height else (height, width)
    if short_side <= 2.0 * sin_a * cos_a * long_side or abs(sin_a - cos_a) < 1e-10:
        x = 0.5 * short_side
        if width >= height:
            return x / sin_a, x / cos_a
        return x / cos_a, x / sin_a
    cos_2a = cos_a * cos_a - sin_a * sin_a
    return (width * cos_a - height * sin_a) / cos_2a, (height * cos_a - width * sin_a) / cos_2a


def _origin_range(extent: int, rect: float, size: int) -> tuple[int, int]:
    # pixel centers span [0, extent-1]; the crop spans size-1 of that range
    center = (extent - 1) / 2.0
    lo = math.ceil(center - rect / 2.0 - 1e-9)
    hi = math.floor(center + rect / 2.0 - (size - 1) + 1e-9)
    return max(lo, 0), min(hi, extent - size)


def valid_origins(width: int, height: int, size: int, angle_deg: float):
    """Inclusive (x_lo, x_hi, y_lo, y_hi) bounds for crop origins at a rotation."""
    rw, rh = inscribed_rect(width - 1, height - 1, angle_deg)
    x_lo, x_hi = _origin_range(width, rw, size)
    y_lo, y_hi = _origin_range(height, rh, size)
    return x_lo, x_hi, y_lo, y_hi


def _fits(width, height, size, angle):
    x_lo, x_hi, y_lo, y_hi = valid_origins(width, height, size, angle)
    return x_lo <= x_hi and y_lo <= y_hi


def minimum_dimensions(width: int, height: int, size: int, angle_deg: float) -> tuple[int, int]:
    """Smallest image with the given aspect ratio that admits a crop at ``angle_deg``."""
    scale = max(size / width, size / height)
    while True:
        w, h = math.ceil(width * scale), math.ceil(height * scale)
        if _fits(w, h, size, angle_deg):
            return w, h
        scale *= 1.01


def check_fits(image: np.ndarray, cfg: AugmentationConfig) -> None:
    h, w = image.shape[:2]
    if not _fits(w, h, cfg.patch_size, cfg.rotation_range):
        mw, mh = minimum_dimensions(w, h, cfg.patch_size, cfg.rotation_range)
        raise GeometryError(
            f"image {w}x{h} too small for a {cfg.patch_size}px crop under "
            f"+/-{cfg.rotation_range} deg rotation; need at least {mw}x{mh}")


def rotated_crop(image: np.ndarray, angle_deg: float, origin: tuple[int, int], size: int) -> np.ndarray:
    """Crop ``size x size`` at ``origin`` from the image rotated about its center.

    Only the requested pixels are resampled (bilinear).
    """
    x0, y0 = origin
    if angle_deg == 0.0:
        return image[y0:y0 + size, x0:x0 + size].copy()
    h, w, channels = image.shape
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    ys, xs = np.mgrid[y0:y0 + size, x0:x0 + size].astype(np.float64)
    a = math.radians(angle_deg)
    cos_a, sin_a = math.cos(a), math.sin(a)
    # inverse rotation maps output pixels back into the source
    dx, dy = xs - cx, ys - cy
    src_x = cos_a * dx - sin_a * dy + cx
    src_y = sin_a * dx + cos_a * dy + cy
    out = np.empty((size, size, channels), dtype=image.dtype)
    for c in range(channels):
        out[:, :, c] = ndimage.map_coordinates(image[:, :, c], [src_y, src_x], order=1, mode="nearest")
    return np.clip(out, 0.0, 1.0)


def augment_view(image, cfg: AugmentationConfig, seed=None, *, flip: bool | None = None,
                 angle: float | None = None, origin: tuple[int, int] | None = None,
                 source_id: str = "") -> PatchView:
    """Draw one training view: flip, then rotate, then crop.

    ``flip``, ``angle`` and ``origin`` override the random draws.
    """
    image = as_image(image)
    check_fits(image, cfg)
    rng = np.random.default_rng(seed)
    size = cfg.patch_size

    do_flip = bool(rng.random() < cfg.flip_probability)
    theta = float(rng.uniform(-cfg.rotation_range, cfg.rotation_range)) if cfg.rotation_range > 0 else 0.0
    if flip is not None:
        do_flip = flip
    if angle is not None:
        theta = float(angle)
    if do_flip:
        image = image[:, ::-1]

    h, w = image.shape[:2]
    x_lo, x_hi, y_lo, y_hi = valid_origins(w, h, size, theta)
    if x_lo > x_hi or y_lo > y_hi:
        raise GeometryError(f"no valid {size}px crop at {theta:.3f} deg for a {w}x{h} image")
    x0 = int(rng.integers(x_lo, x_hi + 1))
    y0 = int(rng.integers(y_lo, y_hi + 1))
    if origin is not None:
        x0, y0 = origin
        if not (x_lo <= x0 <= x_hi and y_lo <= y0 <= y_hi):
            raise GeometryError(f"crop origin {origin} outside valid range "
                                f"x[{x_lo},{x_hi}] y[{y_lo},{y_hi}]")
    pixels = rotated_crop(image, theta, (x0, y0), size)
    return PatchView(pixels, source_id, do_flip, theta, (x0, y0))


def two_views(image, cfg: AugmentationConfig, seed=None, source_id: str = "") -> tuple[PatchView, PatchView]:
    rng = np.random.default_rng(seed)
    return (augment_view(image, cfg, rng, source_id=source_id),
            augment_view(image, cfg, rng, source_id=source_id))


def _round_half_down(v: float) -> int:
    return math.ceil(v - 0.5)


def axis_centers(extent: int, size: int, anchors: int) -> list[int]:
    if extent < size:
        raise GeometryError(f"extent {extent} smaller than patch size {size}")
    if anchors < 1:
        raise GeometryError("need at least one anchor per side")
    lo, hi = size / 2.0, extent - size / 2.0
    if anchors == 1:
        return [_round_half_down((lo + hi) / 2.0)]
    return [_round_half_down(v) for v in np.linspace(lo, hi, anchors)]


def test_grid_centers(width: int, height: int, size: int, anchors: int = 3) -> list[tuple[int, int]]:
    """Uniform grid of ``anchors**2`` crop centers, row-major as (x, y)."""
    xs = axis_centers(width, size, anchors)
    ys = axis_centers(height, size, anchors)
    return [(x, y) for y in ys for x in xs]


test_grid_centers.__test__ = False  # not a pytest test despite the name


def crop_at_center(image, center, size: int) -> PatchView:
    image = as_image(image)
    x, y = center
    if float(x) != int(x) or float(y) != int(y):
        raise GeometryError(f"crop center {center} is not on the pixel grid")
    x, y = int(x), int(y)
    x0, y0 = x - size // 2, y - size // 2
    h, w = image.shape[:2]
    if x0 < 0 or y0 < 0 or x0 + size > w or y0 + size > h:
        raise GeometryError(f"crop of {size}px at center {center} leaves the {w}x{h} image")
    return PatchView(image[y0:y0 + size, x0:x0 + size].copy(), origin=(x0, y0))


def grid_patches(image, size: int, anchors: int = 3) -> list[PatchView]:
    image = as_image(image)
    h, w = image.shape[:2]
    return [crop_at_center(image, c, size) for c in test_grid_centers(w, h, size, anchors)]
