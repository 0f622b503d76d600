"""Finite-difference verification of the loss stack.

Each trial draws raw (unnormalized) view embeddings and raw head weights,
pushes them through the normalization layers into the recognition and
similarity losses, and compares the composed analytic gradient with
central differences of the same scalar.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .losses import MarginConfig, asym_recognition_loss, similarity_loss
from .numerics import gradient_check, l2_normalize, l2_normalize_backward


@dataclass
class TrialResult:
    trial: int
    n_classes: int
    dim: int
    scale: float
    live_margin: float
    spoof_margin: float
    recognition_error: float
    similarity_error: float

    @property
    def max_error(self):
        return max(self.recognition_error, self.similarity_error)


def _stack_value(x, shapes, y, cfg, live, which):
    (n, d), (_, big_n) = shapes[0], shapes[2]
    a = x[:n * d].reshape(n, d)
    b = x[n * d:2 * n * d].reshape(n, d)
    u1, _ = l2_normalize(a)
    u2, _ = l2_normalize(b)
    if which == "sim":
        return similarity_loss(u1, u2)[0]
    c = x[2 * n * d:].reshape(d, big_n)
    w = l2_normalize(c.T)[0].T
    return asym_recognition_loss(u1, u2, y, w, cfg, live)[0]


def _stack_gradient(v1, v2, raw_w, y, cfg, live, which):
    u1, n1 = l2_normalize(v1)
    u2, n2 = l2_normalize(v2)
    if which == "sim":
        _, g1, g2 = similarity_loss(u1, u2)
        gw = np.zeros_like(raw_w)
    else:
        wu, wn = l2_normalize(raw_w.T)
        _, g1, g2, gw_unit = asym_recognition_loss(u1, u2, y, wu.T, cfg, live)
        gw = l2_normalize_backward(wu, wn, gw_unit.T).T
    return np.concatenate([l2_normalize_backward(u1, n1, g1).ravel(),
                           l2_normalize_backward(u2, n2, g2).ravel(), gw.ravel()])


def check_trial(rng, trial: int = 0, n_pairs: int = 2, scale: float | None = None,
                h: float = 1e-5, tolerance: float = 1e-4) -> TrialResult:
    big_n = int(rng.integers(2, 25))
    d = int(rng.integers(2, 65))
    s = float(scale if scale is not None else (1.0, 30.0)[trial % 2])
    m_s, m_l = sorted(float(v) for v in rng.uniform(0.0, 0.5, size=2))
    cfg = MarginConfig(s, m_l, m_s)
    live = np.zeros(big_n, dtype=bool)
    live[rng.permutation(big_n)[:int(rng.integers(1, big_n))]] = True
    y = rng.integers(0, big_n, size=n_pairs)
    v1 = rng.standard_normal((n_pairs, d))
    v2 = rng.standard_normal((n_pairs, d))
    raw_w = rng.standard_normal((d, big_n))
    x0 = np.concatenate([v1.ravel(), v2.ravel(), raw_w.ravel()])
    shapes = (v1.shape, v2.shape, raw_w.shape)

    errors = {}
    for which in ("rec", "sim"):
        analytic = _stack_gradient(v1, v2, raw_w, y, cfg, live, which)
        # similarity does not touch the head; only the view coordinates are checked
        size = x0.size if which == "rec" else 2 * v1.size
        point = x0 if which == "rec" else x0[:size]
        report = gradient_check(lambda x: _stack_value(x, shapes, y, cfg, live, which),
                                point, analytic[:size], h=h, tolerance=tolerance,
                                dtype=np.longdouble)
        errors[which] = report.max_rel_error
    return TrialResult(trial, big_n, d, s, m_l, m_s, errors["rec"], errors["sim"])


def run_suite(trials: int = 100, seed: int = 7, h: float = 1e-5, tolerance: float = 1e-4):
    rng = np.random.default_rng(seed)
    return [check_trial(rng, t, h=h, tolerance=tolerance) for t in range(trials)]
