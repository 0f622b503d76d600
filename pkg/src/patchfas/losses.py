"""Margin-based recognition losses and the two-view similarity loss.

All losses return ``(value, grads...)`` with gradients taken with respect
to the unit embeddings and the unit-column head weights. The classifier
head keeps raw weights and normalizes them on every forward pass, so the
optimizer never has to renormalize.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError, ValidationError
from .numerics import l2_normalize, l2_normalize_backward, logsumexp, softmax

UNIT_TOL = 1e-6


@dataclass(frozen=True)
class MarginConfig:
    scale: float = 30.0
    live_margin: float = 0.4
    spoof_margin: float = 0.1

    def __post_init__(self):
        if self.scale <= 0:
            raise ValidationError("scale must be positive")
        if not 0 <= self.live_margin < 1 or not 0 <= self.spoof_margin < 1:
            raise ValidationError("margins must lie in [0, 1)")
        if self.spoof_margin > self.live_margin:
            raise ValidationError("spoof margin must not exceed the live margin")


@dataclass(frozen=True)
class LossWeights:
    recognition: float = 1.0
    similarity: float = 1.0

    def __post_init__(self):
        if self.recognition < 0 or self.similarity < 0:
            raise ValidationError("loss weights must be non-negative")


class ClassifierHead:
    """Class prototypes as a d x N matrix; columns are normalized on use."""

    def __init__(self, raw):
        self.raw = np.asarray(raw)
        if self.raw.ndim != 2:
            raise ShapeError(f"head weights must be 2-D, got {self.raw.shape}")

    @classmethod
    def init(cls, dim: int, n_classes: int, rng, dtype=np.float64):
        w = rng.standard_normal((dim, n_classes))
        return cls((w / np.linalg.norm(w, axis=0, keepdims=True)).astype(dtype))

    @property
    def dim(self):
        return self.raw.shape[0]

    @property
    def n_classes(self):
        return self.raw.shape[1]

    def forward(self):
        u, norms = l2_normalize(self.raw.T)
        self._cache = (u, norms)
        return u.T

    @property
    def weights(self):
        return l2_normalize(self.raw.T)[0].T

    def backward(self, grad_w):
        u, norms = self._cache
        return l2_normalize_backward(u, norms, grad_w.T).T


def _as_mask(live):
    mask = live.live_mask() if hasattr(live, "live_mask") else np.asarray(live, dtype=bool)
    return mask


def _check_unit(x, what, axis=-1):
    norms = np.sqrt(np.sum(np.asarray(x, dtype=np.float64) ** 2, axis=axis))
    if np.any(np.abs(norms - 1.0) > UNIT_TOL):
        raise ValidationError(f"{what} must be unit-norm (max deviation {np.abs(norms - 1).max():.2e})")


def _prepare(f, y, w):
    f = np.asarray(f)
    single = f.ndim == 1
    f2 = f[None, :] if single else f
    y = np.atleast_1d(np.asarray(y, dtype=np.int64))
    if f2.ndim != 2 or w.ndim != 2 or f2.shape[1] != w.shape[0]:
        raise ShapeError(f"embeddings {f.shape} incompatible with head {w.shape}")
    if y.shape != (f2.shape[0],):
        raise ShapeError(f"labels {y.shape} do not match batch {f2.shape[0]}")
    if np.any(y < 0) or np.any(y >= w.shape[1]):
        raise ValidationError(f"class index out of range [0, {w.shape[1]})")
    _check_unit(f2, "embedding")
    _check_unit(w, "head column", axis=0)
    return f2, y, single


def _margin_softmax(f, y, w, scale, margins):
    """Mean over the batch of -log softmax(target) with the target logit
    shifted by ``scale * margin``. Returns (loss, dL/df, dL/dW)."""
    n = f.shape[0]
    rows = np.arange(n)
    logits = scale * (f @ w)
    logits[rows, y] -= scale * margins
    per_sample = logsumexp(logits) - logits[rows, y]
    dlogits = softmax(logits)
    dlogits[rows, y] -= 1.0
    dcos = scale * dlogits / n
    return per_sample.mean(), dcos @ w.T, f.T @ dcos, per_sample


def am_softmax_loss(f, y, w, scale: float = 30.0, margin: float = 0.4):
    """Additive-margin softmax loss (batch mean when ``f`` is 2-D).

    Returns ``(loss, grad_f, grad_w)``.
    """
    w = np.asarray(w)
    if not 0 <= margin < 1:
        raise ValidationError("margin must lie in [0, 1)")
    f2, y, single = _prepare(f, y, w)
    loss, gf, gw, _ = _margin_softmax(f2, y, w, scale, np.full(len(y), margin, dtype=f2.dtype))
    return loss, (gf[0] if single else gf), gw


def asym_am_softmax_loss(f, y, w, cfg: MarginConfig, live):
    """Margin softmax with ``cfg.live_margin`` on live targets and
    ``cfg.spoof_margin`` on spoof targets. ``live`` is a registry or a
    boolean mask over classes."""
    w = np.asarray(w)
    mask = _as_mask(live)
    if mask.shape != (w.shape[1],):
        raise ShapeError(f"live mask {mask.shape} does not match {w.shape[1]} classes")
    f2, y, single = _prepare(f, y, w)
    margins = np.where(mask[y], cfg.live_margin, cfg.spoof_margin).astype(f2.dtype)
    loss, gf, gw, _ = _margin_softmax(f2, y, w, cfg.scale, margins)
    return loss, (gf[0] if single else gf), gw


def asym_recognition_loss(f1, f2, y, w, cfg: MarginConfig, live):
    """Sum of the two views' asymmetric margin losses, averaged over pairs.

    Returns ``(loss, grad_f1, grad_f2, grad_w)``.
    """
    f1, f2 = np.asarray(f1), np.asarray(f2)
    if f1.ndim != 2 or f1.shape != f2.shape:
        raise ShapeError(f"view batches must have equal 2-D shapes, got {f1.shape} and {f2.shape}")
    if f1.shape[0] == 0:
        raise ValidationError("empty batch")
    l1, g1, gw1 = asym_am_softmax_loss(f1, y, w, cfg, live)
    l2, g2, gw2 = asym_am_softmax_loss(f2, y, w, cfg, live)
    return l1 + l2, g1, g2, gw1 + gw2


def similarity_loss(f1, f2):
    """Mean Euclidean distance between paired views.

    Returns ``(loss, grad_f1, grad_f2)``; the gradient of a zero-distance
    pair is taken as zero.
    """
    f1, f2 = np.asarray(f1), np.asarray(f2)
    if f1.shape != f2.shape:
        raise ShapeError(f"view shapes differ: {f1.shape} vs {f2.shape}")
    if f1.ndim == 1:
        f1, f2 = f1[None], f2[None]
    n = f1.shape[0]
    if n == 0:
        raise ValidationError("empty batch")
    diff = f1 - f2
    dist = np.sqrt(np.sum(diff * diff, axis=1, keepdims=True))
    safe = np.where(dist > 0, dist, 1.0)
    g = np.where(dist > 0, diff / safe, 0.0) / n
    return dist.mean(), g, -g


def total_loss(recognition: float, similarity: float, weights: LossWeights = LossWeights()) -> float:
    return weights.recognition * recognition + weights.similarity * similarity


def cosine_logits(f, w, scale: float):
    """Margin-free test-time logits ``scale * W^T f``."""
    return scale * (np.asarray(f) @ np.asarray(w))
