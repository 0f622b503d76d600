"""Presentation-attack detection metrics.

Scores are live probabilities: higher means more likely live. A sample is
classified live when ``score >= threshold`` (ties count as live). Error
rates are reported as percentages.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

from .errors import MissingFileError, ValidationError


@dataclass(frozen=True)
class ScoredSample:
    """One scored face. ``score`` is a live probability in [0, 1], or a
    cosine similarity in [-1, 1] for reference-based scoring."""

    sample_id: str
    device_id: str
    is_live: bool
    score: float


def _split(scores):
    live = np.array([s.score for s in scores if s.is_live], dtype=np.float64)
    spoof = np.array([s.score for s in scores if not s.is_live], dtype=np.float64)
    if live.size == 0 or spoof.size == 0:
        raise ValidationError(f"need both live and spoof samples (live={live.size}, spoof={spoof.size})")
    return live, spoof


def classification_rates(scores, threshold: float) -> tuple[float, float, float]:
    """APCER, BPCER and ACER (percent) at ``threshold``."""
    live, spoof = _split(scores)
    apcer = 100.0 * np.count_nonzero(spoof >= threshold) / spoof.size
    bpcer = 100.0 * np.count_nonzero(live < threshold) / live.size
    return apcer, bpcer, (apcer + bpcer) / 2.0


def auc(scores) -> float:
    """Area under the ROC curve via the rank-sum statistic (ties count 1/2)."""
    live, spoof = _split(scores)
    ranks = rankdata(np.concatenate([live, spoof]))
    rank_sum = ranks[:live.size].sum()
    return float((rank_sum - live.size * (live.size + 1) / 2.0) / (live.size * spoof.size))


def eer_threshold(scores) -> float:
    """Threshold where APCER equals BPCER, interpolated between candidate thresholds."""
    live, spoof = _split(scores)
    cand = np.unique(np.concatenate([live, spoof]))
    cand = np.append(cand, np.nextafter(cand[-1], np.inf))
    apcer = np.array([np.count_nonzero(spoof >= t) / spoof.size for t in cand])
    bpcer = np.array([np.count_nonzero(live < t) / live.size for t in cand])
    diff = bpcer - apcer  # -1 at the lowest candidate, +1 past the highest
    zero = np.flatnonzero(diff == 0)
    if zero.size:
        return float(cand[zero[0]])
    i = int(np.flatnonzero(diff > 0)[0]) - 1
    t0, t1, d0, d1 = cand[i], cand[i + 1], diff[i], diff[i + 1]
    return float(t0 + (t1 - t0) * (-d0) / (d1 - d0))


def hter(scores, threshold: float) -> float:
    apcer, bpcer, _ = classification_rates(scores, threshold)
    return (apcer + bpcer) / 2.0


@dataclass
class EvalReport:
    threshold: float
    apcer: float
    bpcer: float
    acer: float
    hter: float
    auc: float
    n_live: int
    n_spoof: int

    def to_text(self) -> str:
        return "".join(f"{k} = {v!r}\n" if isinstance(v, float) else f"{k} = {v}\n"
                       for k, v in self.__dict__.items())

    HEADER = "group,threshold,apcer,bpcer,acer,hter,auc,n_live,n_spoof"

    def row(self, group: str) -> str:
        return (f"{group},{self.threshold:.9g},{self.apcer:.9g},{self.bpcer:.9g},{self.acer:.9g},"
                f"{self.hter:.9g},{self.auc:.9g},{self.n_live},{self.n_spoof}")


def evaluate(scores, threshold: float) -> EvalReport:
    apcer, bpcer, acer = classification_rates(scores, threshold)
    live, spoof = _split(scores)
    return EvalReport(threshold, apcer, bpcer, acer, (apcer + bpcer) / 2.0, auc(scores),
                      int(live.size), int(spoof.size))


def per_device_eval(scores, threshold: float) -> dict[str, EvalReport | None]:
    """Evaluate each device separately; devices lacking a class map to None."""
    groups: dict[str, list] = {}
    for s in scores:
        groups.setdefault(s.device_id, []).append(s)
    out = {}
    for device in sorted(groups):
        try:
            out[device] = evaluate(groups[device], threshold)
        except ValidationError:
            out[device] = None
    return out


def write_scores(path, scores) -> None:
    lines = [f"{s.sample_id},{s.device_id},{'LIVE' if s.is_live else 'SPOOF'},{s.score:.9g}\n" for s in scores]
    Path(path).write_text("".join(lines), encoding="utf-8")


def read_scores(path) -> list[ScoredSample]:
    path = Path(path)
    if not path.exists():
        raise MissingFileError(f"score file not found: {path}")
    out = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split(",")
        if len(parts) != 4 or parts[2] not in ("LIVE", "SPOOF"):
            raise ValidationError(f"{path}:{lineno}: malformed score line")
        out.append(ScoredSample(parts[0], parts[1], parts[2] == "LIVE", float(parts[3])))
    return out
