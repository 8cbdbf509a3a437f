"""Metrics: exact ROC-AUC, macro averaging, win/tie/lose tallies, cosine maps."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import MetricError

DEFAULT_TIE_THRESHOLD = 2e-4


def roc_auc(scores, labels) -> float:
    """Mann-Whitney AUC with exact tie handling.

    Ties between a positive and a negative count one half.  Ranks are kept as
    doubled integers so the statistic is exact before the final division.
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if s.ndim != 1 or s.shape != y.shape:
        raise MetricError(f"scores {s.shape} and labels {y.shape} must be equal-length vectors")
    if np.isnan(s).any():
        raise MetricError("scores contain NaN")
    if not np.isin(y, (0, 1)).all():
        raise MetricError(f"labels must be binary 0/1, found {sorted(set(np.unique(y).tolist()))}")
    y = y.astype(np.int64)
    n = y.size
    n_pos = int(y.sum())
    n_neg = n - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricError("roc_auc needs both classes present")

    order = np.argsort(s, kind="mergesort")
    ss, yy = s[order], y[order]
    starts = np.r_[0, np.flatnonzero(ss[1:] != ss[:-1]) + 1]
    ends = np.r_[starts[1:], n]
    pos_in_group = np.add.reduceat(yy, starts)
    # tie group occupying 1-based ranks start+1..end has average rank (start+1+end)/2
    twice_rank_sum = int(np.sum(pos_in_group * (starts + 1 + ends)))
    twice_u = twice_rank_sum - n_pos * (n_pos + 1)
    return twice_u / (2 * n_pos * n_neg)


def average_auc(values: Mapping[str, float] | Iterable[float]) -> float:
    """Unweighted mean over datasets; NaN entries (failed cells) are left out."""
    vals = list(values.values()) if isinstance(values, Mapping) else list(values)
    vals = [float(v) for v in vals if not math.isnan(float(v))]
    if not vals:
        raise MetricError("average_auc needs at least one completed dataset")
    return math.fsum(vals) / len(vals)


@dataclass(frozen=True)
class MetricRecord:
    dataset: str
    plan: str
    auc: float
    baseline_auc: float

    def __post_init__(self):
        for name in ("auc", "baseline_auc"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise MetricError(f"{name}={v} outside [0, 1]")

    @property
    def delta(self) -> float:
        return self.auc - self.baseline_auc

    def row(self) -> list:
        return [self.dataset, self.plan, self.auc, self.baseline_auc, self.delta]


RECORD_COLUMNS = ("dataset", "plan", "auc", "baseline_auc", "delta")


@dataclass(frozen=True)
class WtlSummary:
    wins: int
    ties: int
    losses: int
    tie_threshold: float = DEFAULT_TIE_THRESHOLD

    @property
    def total(self) -> int:
        return self.wins + self.ties + self.losses


def classify_delta(delta: float, tie_threshold: float = DEFAULT_TIE_THRESHOLD) -> str:
    # the tie band is closed: |delta| == threshold counts as a tie
    if abs(delta) <= tie_threshold:
        return "tie"
    return "win" if delta > 0 else "loss"


def win_tie_lose(
    records: Iterable[MetricRecord | float],
    tie_threshold: float = DEFAULT_TIE_THRESHOLD,
) -> WtlSummary:
    """Tally records (or raw deltas) against the baseline with a closed tie band."""
    if not tie_threshold >= 0:
        raise MetricError(f"tie_threshold must be >= 0, got {tie_threshold}")
    counts = {"win": 0, "tie": 0, "loss": 0}
    for r in records:
        delta = r.delta if isinstance(r, MetricRecord) else float(r)
        counts[classify_delta(delta, tie_threshold)] += 1
    return WtlSummary(counts["win"], counts["tie"], counts["loss"], tie_threshold)


@dataclass
class CosineMap:
    """Mean per-row cosine similarity between layers (rows compared to themselves)."""

    matrix: np.ndarray
    excluded_rows: int
    method: str = "per-row mean"


def cosine_similarity_matrix(stack) -> CosineMap:
    """Entry (i, j) is the mean over rows of cos(row at layer i, same row at layer j).

    Accepts an ``EmbeddingStack`` or an array shaped (layers, rows, dim).  Rows
    with a zero-norm embedding at any layer are dropped from every mean and
    counted in ``excluded_rows``.
    """
    states = np.asarray(getattr(stack, "states", stack), dtype=np.float64)
    if states.ndim != 3 or states.shape[0] < 1:
        raise MetricError(f"expected (layers, rows, dim) embeddings, got shape {states.shape}")
    norms = np.linalg.norm(states, axis=-1)
    keep = np.all(norms > 0, axis=0)
    depth = states.shape[0]
    matrix = np.full((depth, depth), np.nan)
    if keep.any():
        unit = states[:, keep] / norms[:, keep, None]
        for i in range(depth):
            matrix[i, i] = 1.0
            for j in range(i + 1, depth):
                c = float(np.clip(np.mean(np.sum(unit[i] * unit[j], axis=-1)), -1.0, 1.0))
                matrix[i, j] = matrix[j, i] = c
    return CosineMap(matrix, int((~keep).sum()))


def triangle_means(matrix: np.ndarray) -> tuple[float, float]:
    """Means of the strictly upper and strictly lower triangles, ignoring NaN."""
    m = np.asarray(matrix, dtype=np.float64)
    upper = m[np.triu_indices_from(m, k=1)]
    lower = m[np.tril_indices_from(m, k=-1)]
    return float(np.nanmean(upper)), float(np.nanmean(lower))


def mean_ignoring_nan(values: Sequence[float]) -> float:
    vals = [v for v in values if not math.isnan(v)]
    return math.fsum(vals) / len(vals) if vals else float("nan")
