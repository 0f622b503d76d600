"""Trained model bundle and its binary file format.

File layout::

    b"PFASCKPT" | u32 version | u32 header length | JSON header |
    tensor payloads (little-endian, header order) | u64 checksum

The checksum is an 8-byte BLAKE2b digest of every preceding byte.
Tensors keep their in-memory precision (float32 or float64) so a
save/load round trip is bit-exact.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .encoder import Encoder, EncoderSpec
from .errors import (CheckpointChecksumError, CheckpointError, CheckpointShapeError,
                     CheckpointTruncatedError, CheckpointVersionError, MissingFileError)
from .numerics import l2_normalize
from .taxonomy import ClassRegistry

MAGIC = b"PFASCKPT"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<8sII")
_DIGEST = 8


@dataclass
class Checkpoint:
    spec: EncoderSpec
    params: dict              # encoder tensors, batchnorm running stats included
    head: np.ndarray          # raw d x N prototypes; columns normalized on use
    registry: ClassRegistry
    config: "TrainConfig"

    def __post_init__(self):
        self._encoder = Encoder(self.spec, self.params)
        if self.head.shape != (self.spec.dim, self.registry.n_classes):
            raise CheckpointShapeError(
                f"tensor head.w has shape {self.head.shape}, expected {(self.spec.dim, self.registry.n_classes)}")

    @property
    def encoder(self) -> Encoder:
        return self._encoder

    @property
    def scale(self) -> float:
        return self.config.margins.scale

    def head_weights(self) -> np.ndarray:
        return l2_normalize(self.head.T)[0].T

    def embed(self, patches) -> np.ndarray:
        return self._encoder.embed(patches)

    def tensors(self) -> dict[str, np.ndarray]:
        out = {name: self.params[name] for name in self.spec.tensor_shapes()}
        out["head.w"] = self.head
        return out


def _digest(data: bytes) -> bytes:
    return hashlib.blake2b(data, digest_size=_DIGEST).digest()


def to_bytes(ckpt: Checkpoint) -> bytes:
    tensors = ckpt.tensors()
    table = []
    payload = []
    for name, arr in tensors.items():
        dt = np.dtype(arr.dtype).newbyteorder("<")
        if dt.kind != "f" or dt.itemsize not in (4, 8):
            raise CheckpointError(f"tensor {name} has unsupported dtype {arr.dtype}")
        table.append([name, dt.str, list(arr.shape)])
        payload.append(np.ascontiguousarray(arr, dtype=dt).tobytes())
    header = {
        "encoder": ckpt.spec.to_dict(),
        "registry": ckpt.registry.to_text(),
        "config": ckpt.config.to_kv(),
        "tensors": table,
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    body = _PREFIX.pack(MAGIC, FORMAT_VERSION, len(hbytes)) + hbytes + b"".join(payload)
    return body + _digest(body)


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    Path(path).write_bytes(to_bytes(ckpt))


def _declared_size(data: bytes):
    """Total file size implied by the header, or None if the header is unreadable."""
    try:
        _, _, hlen = _PREFIX.unpack_from(data)
        header = json.loads(data[_PREFIX.size:_PREFIX.size + hlen].decode("utf-8"))
        body = sum(np.dtype(dt).itemsize * int(np.prod(shape)) for _, dt, shape in header["tensors"])
        return _PREFIX.size + hlen + body + _DIGEST
    except Exception:
        return None


def from_bytes(data: bytes, spec: EncoderSpec | None = None) -> Checkpoint:
    from .training import TrainConfig

    if len(data) < _PREFIX.size + _DIGEST:
        raise CheckpointTruncatedError(f"checkpoint truncated ({len(data)} bytes)")
    magic, version, hlen = _PREFIX.unpack_from(data)
    if magic != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic bytes)")
    if _digest(data[:-_DIGEST]) != data[-_DIGEST:]:
        declared = _declared_size(data)
        if declared is None and _PREFIX.size + hlen + _DIGEST > len(data):
            raise CheckpointTruncatedError(f"checkpoint truncated inside the header ({len(data)} bytes)")
        if declared is not None and declared > len(data):
            raise CheckpointTruncatedError(f"checkpoint truncated: {len(data)} of {declared} bytes")
        raise CheckpointChecksumError("checkpoint checksum mismatch")
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"checkpoint format version {version}, expected {FORMAT_VERSION}")
    header = json.loads(data[_PREFIX.size:_PREFIX.size + hlen].decode("utf-8"))
    offset = _PREFIX.size + hlen
    tensors = {}
    for name, dt, shape in header["tensors"]:
        dt = np.dtype(dt)
        count = int(np.prod(shape))
        end = offset + count * dt.itemsize
        if end > len(data) - _DIGEST:
            raise CheckpointTruncatedError(f"payload of {name} runs past end of file")
        tensors[name] = np.frombuffer(data, dtype=dt, count=count, offset=offset).reshape(shape).astype(
            dt.newbyteorder("="))
        offset = end
    if offset != len(data) - _DIGEST:
        raise CheckpointError("trailing bytes after tensor payloads")

    stored = EncoderSpec.from_dict(header["encoder"])
    target = spec or stored
    head = tensors.pop("head.w", None)
    if head is None:
        raise CheckpointShapeError("missing tensor head.w")
    # raises CheckpointShapeError naming the first mismatched tensor
    Encoder(target, tensors)
    registry = ClassRegistry.from_text(header["registry"])
    config = TrainConfig.from_kv(header["config"])
    return Checkpoint(target, tensors, head, registry, config)


def load_checkpoint(path, spec: EncoderSpec | None = None) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise MissingFileError(f"checkpoint not found: {path}")
    return from_bytes(path.read_bytes(), spec)
