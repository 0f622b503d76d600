"""Test-time scoring: grid-averaged live probability and patch score maps."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .checkpoint import Checkpoint
from .errors import GeometryError, ValidationError
from .imageio import write_image
from .losses import cosine_logits
from .metrics import ScoredSample
from .numerics import softmax
from .patchgeom import as_image, crop_at_center, grid_patches

DEFAULT_ANCHORS = 3
DEFAULT_MAP_STRIDE = 16


def class_mask(registry, exclude=()) -> np.ndarray:
    """Boolean mask of classes kept in the test-time softmax.

    Excluding classes must leave at least one live and one spoof class.
    """
    keep = np.ones(registry.n_classes, dtype=bool)
    for i in exclude:
        if not 0 <= i < registry.n_classes:
            raise ValidationError(f"class index {i} out of range")
        keep[i] = False
    live = registry.live_mask()
    if not np.any(keep & live) or not np.any(keep & ~live):
        raise ValidationError("class mask must keep at least one live and one spoof class")
    return keep


def class_probabilities(emb, weights, scale: float, keep=None) -> np.ndarray:
    """Softmax over margin-free logits; masked classes get probability 0."""
    logits = cosine_logits(emb, weights, scale)
    if keep is None:
        return softmax(logits)
    probs = np.zeros_like(logits)
    probs[..., keep] = softmax(logits[..., keep])
    return probs


def face_patches(face, ckpt: Checkpoint, anchors: int = DEFAULT_ANCHORS) -> np.ndarray:
    face = as_image(face)
    size = ckpt.spec.patch_size
    h, w = face.shape[:2]
    if h < size or w < size:
        raise GeometryError(f"face {w}x{h} smaller than patch size {size}")
    if ckpt.config.input_mode == "resize":
        from .training import resize_whole
        return resize_whole(face, size)[None]
    return np.stack([p.pixels for p in grid_patches(face, size, anchors)])


def patch_live_probs(emb, ckpt: Checkpoint, keep=None) -> np.ndarray:
    probs = class_probabilities(emb, ckpt.head_weights(), ckpt.scale, keep)
    return probs[..., ckpt.registry.live_mask()].sum(axis=-1)


def live_prob(face, ckpt: Checkpoint, anchors: int = DEFAULT_ANCHORS, exclude=()) -> float:
    """Mean over grid patches of the summed live-class probabilities."""
    keep = class_mask(ckpt.registry, exclude) if exclude else None
    emb = ckpt.embed(face_patches(face, ckpt, anchors))
    return float(np.mean(patch_live_probs(emb, ckpt, keep)))


def score_faces(faces, ids, devices, is_live, ckpt, anchors=DEFAULT_ANCHORS, exclude=()):
    return [ScoredSample(i, d, bool(l), live_prob(f, ckpt, anchors, exclude))
            for f, i, d, l in zip(faces, ids, devices, is_live)]


def score_manifest(manifest, ckpt, images=None, anchors=DEFAULT_ANCHORS, exclude=()):
    from .synthdata import load_images
    if images is None:
        images = load_images(manifest, ckpt.encoder.dtype)
    return score_faces(images, [e.path for e in manifest], [e.label.device_id for e in manifest],
                       [e.label.is_live for e in manifest], ckpt, anchors, exclude)


@dataclass
class ScoreMap:
    values: np.ndarray   # (len(ys), len(xs)) live probabilities
    xs: list[int]
    ys: list[int]

    def sidecar_text(self) -> str:
        return (f"# patch-center coordinates for each pixel of the score map\n"
                f"xs = {','.join(map(str, self.xs))}\n"
                f"ys = {','.join(map(str, self.ys))}\n")

    def save(self, pgm_path) -> None:
        pgm_path = Path(pgm_path)
        write_image(pgm_path, self.values)
        pgm_path.with_suffix(".coords").write_text(self.sidecar_text(), encoding="utf-8")


def map_centers(extent: int, size: int, stride: int) -> list[int]:
    """Centers from the first to the last valid crop position, ``stride`` apart."""
    if extent < size:
        raise GeometryError(f"extent {extent} smaller than patch size {size}")
    if stride < 1:
        raise ValidationError("stride must be >= 1")
    first, last = size // 2, extent - size + size // 2
    return list(range(first, last + 1, stride))


def patch_score_map(face, ckpt: Checkpoint, stride: int = DEFAULT_MAP_STRIDE, exclude=()) -> ScoreMap:
    face = as_image(face)
    size = ckpt.spec.patch_size
    h, w = face.shape[:2]
    xs, ys = map_centers(w, size, stride), map_centers(h, size, stride)
    keep = class_mask(ckpt.registry, exclude) if exclude else None
    patches = np.stack([crop_at_center(face, (x, y), size).pixels for y in ys for x in xs])
    probs = patch_live_probs(ckpt.embed(patches), ckpt, keep)
    return ScoreMap(probs.reshape(len(ys), len(xs)), xs, ys)
