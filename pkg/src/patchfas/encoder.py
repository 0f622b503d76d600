"""Tiny strided CNN patch encoder producing unit-norm embeddings.

Layout: ``[conv3x3/2 -> batchnorm -> ReLU] * len(stages) -> global
average pool -> dense -> L2 normalize``. Inputs are NHWC patches in
[0, 1], shifted to zero mean before the first convolution.

Batch normalization uses batch statistics while training and running
statistics (kept in ``buffers``) at inference, so inference on one patch
never depends on the other patches in a batch.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import CheckpointShapeError, ShapeError
from .numerics import (batchnorm_backward, batchnorm_forward, conv_backward, conv_forward,
                       dense_backward, dense_forward, global_avg_pool_backward,
                       global_avg_pool_forward, l2_normalize, l2_normalize_backward,
                       relu_backward, relu_forward)

BN_MOMENTUM = 0.1


@dataclass(frozen=True)
class EncoderSpec:
    stages: tuple[int, ...] = (16, 32, 64, 128)
    dim: int = 128
    patch_size: int = 160
    channels: int = 1

    def __post_init__(self):
        object.__setattr__(self, "stages", tuple(int(s) for s in self.stages))
        if not self.stages or min(self.stages) < 1 or self.dim < 1:
            raise ShapeError(f"invalid encoder spec {self}")
        if self.channels not in (1, 3):
            raise ShapeError("channels must be 1 or 3")
        if self.patch_size < 1:
            raise ShapeError("patch_size must be positive")

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        shapes = {}
        cin = self.channels
        for i, cout in enumerate(self.stages):
            shapes[f"conv{i}.w"] = (3, 3, cin, cout)
            shapes[f"bn{i}.gamma"] = (cout,)
            shapes[f"bn{i}.beta"] = (cout,)
            cin = cout
        shapes["fc.w"] = (cin, self.dim)
        shapes["fc.b"] = (self.dim,)
        return shapes

    def buffer_shapes(self) -> dict[str, tuple[int, ...]]:
        shapes = {}
        for i, cout in enumerate(self.stages):
            shapes[f"bn{i}.mean"] = (cout,)
            shapes[f"bn{i}.var"] = (cout,)
        return shapes

    def tensor_shapes(self) -> dict[str, tuple[int, ...]]:
        return {**self.param_shapes(), **self.buffer_shapes()}

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(d["stages"]), d["dim"], d["patch_size"], d["channels"])


def init_tensors(spec: EncoderSpec, rng, dtype=np.float32) -> dict[str, np.ndarray]:
    """Fan-in scaled uniform weights, unit BN scales, zero shifts and biases."""
    out = {}
    for name, shape in spec.tensor_shapes().items():
        if name.endswith((".gamma", ".var")):
            out[name] = np.ones(shape, dtype=dtype)
        elif name.endswith((".beta", ".mean", ".b")):
            out[name] = np.zeros(shape, dtype=dtype)
        else:
            fan_in = int(np.prod(shape[:-1]))
            gain = 6.0 if name.startswith("conv") else 3.0
            bound = np.sqrt(gain / fan_in)
            out[name] = rng.uniform(-bound, bound, size=shape).astype(dtype)
    return out


@dataclass
class ForwardCache:
    stages: list = field(default_factory=list)
    pooled_shape: tuple = ()
    pooled: np.ndarray | None = None
    unit: np.ndarray | None = None
    norms: np.ndarray | None = None


class Encoder:
    def __init__(self, spec: EncoderSpec, tensors: dict[str, np.ndarray]):
        self.spec = spec
        self.check_tensors(tensors)
        names = spec.param_shapes()
        self.params = {k: tensors[k] for k in names}
        self.buffers = {k: tensors[k] for k in spec.buffer_shapes()}

    @classmethod
    def create(cls, spec: EncoderSpec, rng, dtype=np.float32) -> "Encoder":
        return cls(spec, init_tensors(spec, rng, dtype))

    def check_tensors(self, tensors):
        expected = self.spec.tensor_shapes()
        for name, shape in expected.items():
            if name not in tensors:
                raise CheckpointShapeError(f"missing tensor {name} (expected shape {shape})")
            if tuple(tensors[name].shape) != shape:
                raise CheckpointShapeError(
                    f"tensor {name} has shape {tuple(tensors[name].shape)}, expected {shape}")
        extra = set(tensors) - set(expected)
        if extra:
            raise CheckpointShapeError(f"unexpected tensors: {sorted(extra)}")

    def tensors(self) -> dict[str, np.ndarray]:
        merged = {**self.params, **self.buffers}
        return {k: merged[k] for k in self.spec.tensor_shapes()}

    @property
    def dtype(self):
        return self.params["fc.w"].dtype

    def _check_input(self, x):
        x = np.asarray(x, dtype=self.dtype)
        if x.ndim == 3:
            x = x[None]
        p, c = self.spec.patch_size, self.spec.channels
        if x.ndim != 4 or x.shape[1:] != (p, p, c):
            raise ShapeError(f"encoder expects patches of shape (B, {p}, {p}, {c}), got {x.shape}")
        return x

    def forward(self, x, cache: ForwardCache | None = None, training: bool = False,
                update_stats: bool = True):
        """Embed a batch of patches. Returns unit vectors of shape (B, dim).

        ``training`` switches batchnorm to batch statistics; with
        ``update_stats`` the running statistics absorb them.
        """
        x = self._check_input(x) - self.dtype.type(0.5)
        for i in range(len(self.spec.stages)):
            z, cols = conv_forward(x, self.params[f"conv{i}.w"], None)
            gamma, beta = self.params[f"bn{i}.gamma"], self.params[f"bn{i}.beta"]
            if training:
                zn, bn_cache = batchnorm_forward(z, gamma, beta)
                if update_stats:
                    m = z.shape[0] * z.shape[1] * z.shape[2]
                    _, _, mean, var = bn_cache
                    rm, rv = self.buffers[f"bn{i}.mean"], self.buffers[f"bn{i}.var"]
                    rm *= 1 - BN_MOMENTUM
                    rm += (BN_MOMENTUM * mean).astype(rm.dtype)
                    rv *= 1 - BN_MOMENTUM
                    rv += (BN_MOMENTUM * var * m / max(m - 1, 1)).astype(rv.dtype)
            else:
                zn, bn_cache = batchnorm_forward(z, gamma, beta, self.buffers[f"bn{i}.mean"],
                                                 self.buffers[f"bn{i}.var"])
            a = relu_forward(zn)
            if cache is not None:
                cache.stages.append((x.shape, cols, bn_cache, zn))
            x = a
        pooled = global_avg_pool_forward(x)
        out = dense_forward(pooled, self.params["fc.w"], self.params["fc.b"])
        unit, norms = l2_normalize(out)
        if cache is not None:
            cache.pooled_shape = x.shape
            cache.pooled = pooled
            cache.unit, cache.norms = unit, norms
        return unit

    def backward(self, cache: ForwardCache, grad_unit) -> dict[str, np.ndarray]:
        """Parameter gradients for a training-mode forward pass."""
        grads = {}
        g = l2_normalize_backward(cache.unit, cache.norms, grad_unit)
        g, grads["fc.w"], grads["fc.b"] = dense_backward(cache.pooled, self.params["fc.w"], g)
        g = global_avg_pool_backward(cache.pooled_shape, g)
        for i in reversed(range(len(self.spec.stages))):
            x_shape, cols, bn_cache, zn = cache.stages[i]
            g = relu_backward(zn, g)
            g, grads[f"bn{i}.gamma"], grads[f"bn{i}.beta"] = batchnorm_backward(
                bn_cache, self.params[f"bn{i}.gamma"], g)
            g, grads[f"conv{i}.w"], _ = conv_backward(x_shape, cols, self.params[f"conv{i}.w"], g)
        return grads

    def embed(self, patches, batch_size: int = 256) -> np.ndarray:
        """Inference-mode forward in chunks."""
        patches = self._check_input(patches)
        out = [self.forward(patches[i:i + batch_size]) for i in range(0, len(patches), batch_size)]
        return np.concatenate(out, axis=0)

    def n_params(self) -> int:
        return int(sum(p.size for p in self.params.values()))
