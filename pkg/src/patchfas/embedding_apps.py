"""Applications of the normalized patch embedding space.

* few-shot reference scoring: mean cosine similarity of a face's grid
  patches to a handful of known-live embeddings from the target device;
* patch-type retrieval: rank trained class prototypes against a query.

Class masking at test time lives in :func:`patchfas.scoring.class_mask`.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import MissingFileError, ShapeError, ValidationError
from .losses import UNIT_TOL


def _unit_rows(x, what):
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if np.any(np.abs(np.linalg.norm(x, axis=1) - 1.0) > 1e-5):
        raise ValidationError(f"{what} must be unit-norm")
    return x


@dataclass
class ReferenceSet:
    embeddings: np.ndarray   # (shots, d), unit rows

    def __post_init__(self):
        self.embeddings = np.atleast_2d(np.asarray(self.embeddings, dtype=np.float64))
        if self.embeddings.shape[0] == 0:
            raise ValidationError("reference set is empty")
        _unit_rows(self.embeddings, "reference embeddings")

    @property
    def shots(self):
        return self.embeddings.shape[0]

    @property
    def dim(self):
        return self.embeddings.shape[1]

    def to_text(self) -> str:
        rows = [f"{self.dim} {self.shots}"]
        rows += [" ".join(f"{v:.9g}" for v in row) for row in self.embeddings]
        return "\n".join(rows) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "ReferenceSet":
        lines = [l for l in text.splitlines() if l.strip()]
        if not lines:
            raise ValidationError("empty reference file")
        dim, count = (int(v) for v in lines[0].split())
        rows = np.array([[float(v) for v in l.split()] for l in lines[1:]], dtype=np.float64)
        if rows.shape != (count, dim):
            raise ShapeError(f"reference file declares {count}x{dim}, holds {rows.shape}")
        # 9 significant digits leave ~1e-9 norm drift; renormalize
        return cls(rows / np.linalg.norm(rows, axis=1, keepdims=True))

    def save(self, path):
        Path(path).write_text(self.to_text(), encoding="utf-8")

    @classmethod
    def load(cls, path):
        path = Path(path)
        if not path.exists():
            raise MissingFileError(f"reference file not found: {path}")
        return cls.from_text(path.read_text(encoding="utf-8"))


def fewshot_score(patch_embeddings, refs: ReferenceSet) -> float:
    """Mean over patches of the mean cosine similarity to every reference."""
    if not isinstance(refs, ReferenceSet):
        refs = ReferenceSet(refs)
    emb = _unit_rows(patch_embeddings, "test embeddings")
    if emb.shape[1] != refs.dim:
        raise ShapeError(f"embedding dim {emb.shape[1]} differs from reference dim {refs.dim}")
    return float(np.mean(emb @ refs.embeddings.T))


def build_references(face_embeddings) -> ReferenceSet:
    """Reference set from per-face patch embeddings, all patches pooled."""
    return ReferenceSet(np.concatenate([np.atleast_2d(e) for e in face_embeddings], axis=0))


@dataclass(frozen=True)
class Retrieved:
    rank: int
    index: int
    name: str
    is_live: bool
    similarity: float


def retrieve_patch_types(query, weights, registry, top_k: int) -> list[Retrieved]:
    """Classes ranked by cosine similarity of their prototype to ``query``.

    Ties keep ascending class index.
    """
    q = np.asarray(query, dtype=np.float64).reshape(-1)
    if abs(np.linalg.norm(q) - 1.0) > UNIT_TOL * 10:
        raise ValidationError("query must be unit-norm")
    w = np.asarray(weights, dtype=np.float64)
    n = w.shape[1]
    if w.shape[0] != q.size or n != registry.n_classes:
        raise ShapeError(f"query dim {q.size} / head {w.shape} / registry N={registry.n_classes} disagree")
    if not 1 <= top_k <= n:
        raise ValidationError(f"top_k must be in [1, {n}], got {top_k}")
    sims = q @ w
    order = sorted(range(n), key=lambda j: (-sims[j], j))[:top_k]
    return [Retrieved(r + 1, j, registry.classes[j].name, registry.is_live(j), float(sims[j]))
            for r, j in enumerate(order)]
