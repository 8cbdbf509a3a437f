"""Synthetic binary tabular tasks and episode splitting.

Tasks come from a random teacher (linear or a small tanh network) whose
noisy output is thresholded at its median, so both classes are always present.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, SplitError


class Teacher(str, enum.Enum):
    LINEAR = "linear"
    RANDOM_MLP = "random_mlp"


MLP_HIDDEN = 16


@dataclass(frozen=True)
class TaskPrior:
    feature_count_range: tuple[int, int] = (2, 8)
    sample_count_range: tuple[int, int] = (40, 120)
    teacher: Teacher = Teacher.LINEAR
    noise_std: float = 0.1
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "teacher", Teacher(self.teacher))
        object.__setattr__(self, "feature_count_range", tuple(int(v) for v in self.feature_count_range))
        object.__setattr__(self, "sample_count_range", tuple(int(v) for v in self.sample_count_range))
        for name in ("feature_count_range", "sample_count_range"):
            rng = getattr(self, name)
            if len(rng) != 2 or rng[0] > rng[1] or rng[0] < 1:
                raise ConfigError(f"{name} must be a nonempty interval of positive integers, got {rng}")
        if self.sample_count_range[0] < 2:
            raise ConfigError("sample_count_range must allow at least 2 rows")
        if not self.noise_std >= 0:
            raise ConfigError(f"noise_std must be >= 0, got {self.noise_std}")

    def to_dict(self) -> dict:
        return {
            "feature_count_range": list(self.feature_count_range),
            "sample_count_range": list(self.sample_count_range),
            "teacher": self.teacher.value,
            "noise_std": self.noise_std,
            "seed": self.seed,
        }


@dataclass
class Table:
    """Numeric feature matrix plus binary target."""

    X: np.ndarray
    y: np.ndarray
    name: str = "table"
    feature_names: list[str] = field(default_factory=list)
    notes: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64)
        if self.X.ndim != 2 or self.y.shape != (self.X.shape[0],):
            raise ConfigError(f"inconsistent table shapes X={self.X.shape}, y={self.y.shape}")
        if not self.feature_names:
            self.feature_names = [f"x{i}" for i in range(self.X.shape[1])]

    @property
    def n_rows(self) -> int:
        return self.X.shape[0]

    @property
    def n_features(self) -> int:
        return self.X.shape[1]


def _as_generator(rng) -> np.random.Generator:
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)


def sample_task(
    prior: TaskPrior,
    rng=None,
    *,
    n_rows: int | None = None,
    n_features: int | None = None,
    name: str = "synthetic",
) -> Table:
    """Draw one task.  ``rng`` defaults to the prior's own seed.

    ``n_rows``/``n_features`` pin the sizes instead of drawing them (used to
    build equal-shape training batches); they must lie in the prior's ranges.
    """
    rng = np.random.default_rng(prior.seed) if rng is None else _as_generator(rng)
    lo_n, hi_n = prior.sample_count_range
    lo_d, hi_d = prior.feature_count_range
    n = int(rng.integers(lo_n, hi_n + 1)) if n_rows is None else int(n_rows)
    d = int(rng.integers(lo_d, hi_d + 1)) if n_features is None else int(n_features)
    if not (lo_n <= n <= hi_n and lo_d <= d <= hi_d):
        raise ConfigError(f"requested size ({n} rows, {d} features) outside the prior's ranges")

    X = rng.standard_normal((n, d))
    if prior.teacher is Teacher.LINEAR:
        w = rng.standard_normal(d)
        f = X @ w
    else:
        w1 = rng.normal(0.0, np.sqrt(1.0 / d), size=(d, MLP_HIDDEN))
        b1 = rng.normal(0.0, np.sqrt(1.0 / d), size=MLP_HIDDEN)
        w2 = rng.normal(0.0, np.sqrt(1.0 / MLP_HIDDEN), size=MLP_HIDDEN)
        f = np.tanh(X @ w1 + b1) @ w2
    f = f + prior.noise_std * rng.standard_normal(n)
    y = (f > np.median(f)).astype(np.int64)
    if y.min() == y.max():
        # only reachable with tied teacher outputs; fall back to a rank split
        y = np.zeros(n, dtype=np.int64)
        y[np.argsort(f, kind="stable")[n // 2:]] = 1
    return Table(X, y, name=name)


@dataclass
class Episode:
    """One ICL instance over a table: support, probe-train and query index sets.

    Query labels are kept for scoring but are never fed to a model.
    """

    table: Table
    support_idx: np.ndarray
    probe_idx: np.ndarray
    query_idx: np.ndarray

    @property
    def support_x(self) -> np.ndarray:
        return self.table.X[self.support_idx]

    @property
    def support_y(self) -> np.ndarray:
        return self.table.y[self.support_idx]

    @property
    def probe_x(self) -> np.ndarray:
        return self.table.X[self.probe_idx]

    @property
    def probe_y(self) -> np.ndarray:
        return self.table.y[self.probe_idx]

    @property
    def query_x(self) -> np.ndarray:
        return self.table.X[self.query_idx]

    @property
    def query_y(self) -> np.ndarray:
        return self.table.y[self.query_idx]

    @property
    def n_features(self) -> int:
        return self.table.n_features


def _round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))


def split_episode(
    table: Table,
    support_fraction: float = 0.35,
    probe_fraction: float | None = None,
    rng=None,
) -> Episode:
    """Stratified three-way split into support, probe-train and query rows.

    ``probe_fraction`` defaults to ``support_fraction``, i.e. the probe-train
    rows are half of the nominal training split (support + probe-train).
    Per-class counts are rounded half-up with ties going to the lower class
    label; rows inside a class are assigned in a random order drawn from ``rng``.
    """
    if probe_fraction is None:
        probe_fraction = support_fraction
    if not (0 < support_fraction < 1 and 0 < probe_fraction < 1):
        raise SplitError(f"fractions must lie in (0, 1), got {support_fraction}, {probe_fraction}")
    if support_fraction + probe_fraction >= 1:
        raise SplitError("support_fraction + probe_fraction must be < 1")
    rng = _as_generator(rng)

    n = table.n_rows
    n_support = _round_half_up(support_fraction * n)
    n_probe = _round_half_up(probe_fraction * n)
    classes = [np.flatnonzero(table.y == c) for c in (0, 1)]
    counts = [len(c) for c in classes]
    if min(counts) == 0:
        raise SplitError("table contains a single class")

    s0 = _round_half_up(counts[0] * n_support / n)
    p0 = _round_half_up(counts[0] * n_probe / n)
    alloc = [(s0, p0), (n_support - s0, n_probe - p0)]

    parts: dict[str, list[np.ndarray]] = {"support": [], "probe": [], "query": []}
    for rows, m, (s, p) in zip(classes, counts, alloc):
        q = m - s - p
        if min(s, p, q) < 2:
            raise SplitError(
                f"table of {n} rows (class counts {counts}) too small for >= 2 rows of each class "
                f"in every split (got support={s}, probe={p}, query={q} for one class)"
            )
        order = rows[rng.permutation(m)]
        parts["support"].append(order[:s])
        parts["probe"].append(order[s:s + p])
        parts["query"].append(order[s + p:])
    return Episode(
        table,
        np.sort(np.concatenate(parts["support"])),
        np.sort(np.concatenate(parts["probe"])),
        np.sort(np.concatenate(parts["query"])),
    )
