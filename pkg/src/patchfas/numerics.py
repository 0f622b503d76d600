"""Small differentiable layer set with hand-written backward passes.

Every op has a ``*_forward`` returning the output plus whatever the
backward pass needs, and a ``*_backward`` taking the upstream gradient.
Feature maps are NHWC. Arrays are plain numpy; precision follows the
dtype of the inputs (float64 for checks, float32 for training).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError, ValidationError

EPS = {np.dtype(np.float64): 1e-12, np.dtype(np.float32): 1e-7}


def norm_eps(dtype) -> float:
    return EPS.get(np.dtype(dtype), 1e-12)


# ---------------------------------------------------------------------------
# normalization and softmax

def l2_normalize(v, eps: float | None = None):
    """Normalize along the last axis. Returns ``(u, norms)``."""
    v = np.asarray(v)
    if eps is None:
        eps = norm_eps(v.dtype)
    norms = np.sqrt(np.sum(v * v, axis=-1, keepdims=True))
    if np.any(norms <= eps):
        raise ValidationError("cannot normalize a (near) zero vector; embedding collapsed")
    return v / norms, norms


def l2_normalize_backward(u, norms, grad):
    """Apply (I - u u^T) / ||v|| to the upstream gradient."""
    radial = np.sum(grad * u, axis=-1, keepdims=True)
    return (grad - radial * u) / norms


def log_softmax(logits):
    logits = np.asarray(logits)
    if not np.all(np.isfinite(logits)):
        raise ValidationError("logits must be finite")
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))


def logsumexp(logits):
    logits = np.asarray(logits)
    top = logits.max(axis=-1, keepdims=True)
    return (top + np.log(np.sum(np.exp(logits - top), axis=-1, keepdims=True)))[..., 0]


def softmax(logits):
    return np.exp(log_softmax(logits))


def softmax_backward(probs, grad):
    """Vector-Jacobian product of softmax along the last axis."""
    return probs * (grad - np.sum(grad * probs, axis=-1, keepdims=True))


# ---------------------------------------------------------------------------
# dense / relu / pooling

def dense_forward(x, w, b):
    if x.shape[-1] != w.shape[0] or b.shape != (w.shape[1],):
        raise ShapeError(f"dense: input {x.shape} incompatible with weight {w.shape} / bias {b.shape}")
    return x @ w + b


def dense_backward(x, w, grad):
    return grad @ w.T, x.T @ grad, grad.sum(axis=0)


def relu_forward(x):
    return np.maximum(x, 0)


def relu_backward(x, grad):
    return grad * (x > 0)


def global_avg_pool_forward(x):
    return x.mean(axis=(1, 2))


def global_avg_pool_backward(shape, grad):
    n, h, w, c = shape
    return np.broadcast_to(grad[:, None, None, :] / (h * w), shape).copy()


# ---------------------------------------------------------------------------
# batch normalization over (N, H, W) per channel

BN_EPS = 1e-5


def batchnorm_forward(x, gamma, beta, mean=None, var=None):
    """Normalize NHWC activations per channel.

    With ``mean``/``var`` given (inference) those statistics are used;
    otherwise batch statistics are computed. Returns ``(out, cache)``.
    """
    if gamma.shape != (x.shape[-1],) or beta.shape != gamma.shape:
        raise ShapeError(f"batchnorm: input {x.shape} incompatible with gamma {gamma.shape}")
    if mean is None:
        mean = x.mean(axis=(0, 1, 2))
        var = x.var(axis=(0, 1, 2))
    inv_std = 1.0 / np.sqrt(var + BN_EPS)
    xhat = (x - mean) * inv_std
    return gamma * xhat + beta, (xhat, inv_std, mean, var)


def batchnorm_backward(cache, gamma, grad):
    """Backward pass for batch statistics (training mode)."""
    xhat, inv_std, _, _ = cache
    m = grad.shape[0] * grad.shape[1] * grad.shape[2]
    dgamma = np.sum(grad * xhat, axis=(0, 1, 2))
    dbeta = grad.sum(axis=(0, 1, 2))
    dxhat = grad * gamma
    dx = inv_std / m * (m * dxhat - dxhat.sum(axis=(0, 1, 2)) - xhat * np.sum(dxhat * xhat, axis=(0, 1, 2)))
    return dx, dgamma, dbeta


# ---------------------------------------------------------------------------
# convolution (im2col)

def conv_output_size(extent: int, kernel: int = 3, stride: int = 2, pad: int = 1) -> int:
    return (extent + 2 * pad - kernel) // stride + 1


def conv_forward(x, w, b, stride: int = 2, pad: int = 1):
    """Convolution of NHWC input with a (k, k, C_in, C_out) kernel.

    ``b`` may be None (no bias). Returns ``(out, cols)``; ``cols`` is
    reused by the backward pass.
    """
    if x.ndim != 4:
        raise ShapeError(f"conv: expected NHWC input, got shape {x.shape}")
    k = w.shape[0]
    if w.ndim != 4 or w.shape[1] != k or w.shape[2] != x.shape[3] or (
            b is not None and b.shape != (w.shape[3],)):
        raise ShapeError(f"conv: input {x.shape} incompatible with kernel {w.shape}"
                         f" / bias {None if b is None else b.shape}")
    n, h, wd, c = x.shape
    ho, wo = conv_output_size(h, k, stride, pad), conv_output_size(wd, k, stride, pad)
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv: input {x.shape} too small for kernel {w.shape}")
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0))) if pad else x
    cols = np.empty((n, ho, wo, k, k, c), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, :, :, i, j, :] = xp[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :]
    out = cols.reshape(n * ho * wo, k * k * c) @ w.reshape(k * k * c, -1)
    if b is not None:
        out += b
    return out.reshape(n, ho, wo, -1), cols


def conv_backward(x_shape, cols, w, grad, stride: int = 2, pad: int = 1):
    n, h, wd, c = x_shape
    k = w.shape[0]
    _, ho, wo, cout = grad.shape
    g2 = grad.reshape(-1, cout)
    cols2 = cols.reshape(g2.shape[0], -1)
    dw = (cols2.T @ g2).reshape(w.shape)
    db = g2.sum(axis=0)
    dcols = (g2 @ w.reshape(-1, cout).T).reshape(n, ho, wo, k, k, c)
    dxp = np.zeros((n, h + 2 * pad, wd + 2 * pad, c), dtype=grad.dtype)
    for i in range(k):
        for j in range(k):
            dxp[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :] += dcols[:, :, :, i, j, :]
    dx = dxp[:, pad:pad + h, pad:pad + wd, :] if pad else dxp
    return dx, dw, db


# ---------------------------------------------------------------------------
# optimizer

@dataclass
class SgdState:
    learning_rate: float = 0.002
    halve_every: int = 90
    momentum: float = 0.9
    velocity: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValidationError("learning_rate must be positive")
        if self.halve_every < 1:
            raise ValidationError("halve_every must be >= 1")
        if not 0 <= self.momentum < 1:
            raise ValidationError("momentum must be in [0, 1)")

    def rate(self, epoch: int) -> float:
        return self.learning_rate * 0.5 ** (epoch // self.halve_every)


def sgd_step(params: dict, grads: dict, state: SgdState, epoch: int) -> dict:
    """In-place momentum SGD update (velocity = mu * velocity + grad)."""
    lr = state.rate(epoch)
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeError(f"sgd: gradient {g.shape} does not match parameter {name} {p.shape}")
        v = state.velocity.get(name)
        if v is None:
            v = np.zeros_like(p)
        v = state.momentum * v + g
        state.velocity[name] = v
        p -= (lr * v).astype(p.dtype, copy=False)
    return params


# ---------------------------------------------------------------------------
# finite-difference gradient check

@dataclass
class GradCheckReport:
    max_rel_error: float
    worst_index: tuple
    analytic: np.ndarray
    numeric: np.ndarray
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def relative_error(a, b, floor: float = 1e-8):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def numeric_gradient(f, point, h: float = 1e-5, dtype=np.float64):
    """Central differences of scalar ``f`` at ``point``, one coordinate at a time.

    ``dtype`` sets the precision the perturbed points are built in. Passing
    ``np.longdouble`` together with an ``f`` that keeps that precision lowers
    the round-off floor of (f(x+h) - f(x-h)) / 2h by about three digits,
    which matters for losses whose values are large next to their smallest
    gradient entries.
    """
    x = np.array(point, dtype=dtype)
    grad = np.zeros(x.shape, dtype=dtype)
    flat, gflat = x.reshape(-1), grad.reshape(-1)

    def central(i, step):
        orig = flat[i]
        flat[i] = orig + step
        fp = f(x)
        flat[i] = orig - step
        fm = f(x)
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise ValidationError(f"non-finite function value near coordinate {i}")
        return (fp - fm) / (2 * step)

    for i in range(flat.size):
        gflat[i] = central(i, h)
    return grad


def gradient_check(f, point, analytic, h: float = 1e-5, tolerance: float = 1e-4,
                   dtype=np.float64) -> GradCheckReport:
    """Compare an analytic gradient with central differences of ``f``."""
    analytic = np.asarray(analytic, dtype=np.float64)
    if analytic.shape != np.shape(point):
        raise ShapeError(f"gradient shape {analytic.shape} differs from point shape {np.shape(point)}")
    if not np.all(np.isfinite(analytic)):
        raise ValidationError("analytic gradient is not finite")
    numeric = numeric_gradient(f, point, h, dtype).astype(np.float64)
    err = relative_error(analytic, numeric)
    worst = np.unravel_index(int(np.argmax(err)), err.shape) if err.size else ()
    return GradCheckReport(float(err.max()) if err.size else 0.0, worst, analytic, numeric, tolerance)
