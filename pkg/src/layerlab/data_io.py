"""CSV ingestion and preprocessing of user-supplied binary classification tables.

Schema files are YAML (or JSON) of the form::

    columns:
      age: numeric
      job:
        kind: categorical
        missing: ["unknown"]

Columns absent from the schema have their kind inferred: numeric if every
non-missing value parses as a float, categorical otherwise.
"""

from __future__ import annotations

import csv
import enum
import logging
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import yaml

from .errors import IngestionError
from .prior import Episode, Table

log = logging.getLogger(__name__)

DEFAULT_MISSING = ("", "?", "NA", "N/A", "NaN", "nan", "null", "None")


class ColumnKind(str, enum.Enum):
    NUMERIC = "numeric"
    CATEGORICAL = "categorical"


@dataclass(frozen=True)
class RawColumnSpec:
    name: str
    kind: ColumnKind | None = None  # None: infer
    missing: tuple[str, ...] = DEFAULT_MISSING


@dataclass
class RawTable:
    """Parsed but unprocessed columns.

    Numeric columns are float arrays with NaN for missing values; categorical
    columns are lists of strings with None for missing values.
    """

    columns: dict[str, np.ndarray | list]
    kinds: dict[str, ColumnKind]
    y: np.ndarray
    target: str
    classes: tuple[str, str]
    name: str = "table"

    @property
    def n_rows(self) -> int:
        return len(self.y)

    @classmethod
    def from_table(cls, table: Table) -> "RawTable":
        cols = {n: table.X[:, i].copy() for i, n in enumerate(table.feature_names)}
        kinds = {n: ColumnKind.NUMERIC for n in cols}
        return cls(cols, kinds, table.y.copy(), "target", ("0", "1"), table.name)


def load_schema(path: str | Path) -> dict[str, RawColumnSpec]:
    try:
        doc = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
    except (OSError, yaml.YAMLError) as exc:
        raise IngestionError(f"cannot read schema {path}: {exc}") from exc
    specs = {}
    for name, entry in (doc.get("columns") or {}).items():
        if isinstance(entry, str):
            entry = {"kind": entry}
        try:
            kind = ColumnKind(entry.get("kind")) if entry.get("kind") else None
        except ValueError as exc:
            raise IngestionError(f"schema column {name!r}: unknown kind {entry.get('kind')!r}") from exc
        missing = tuple(entry.get("missing", DEFAULT_MISSING))
        specs[name] = RawColumnSpec(name, kind, missing)
    return specs


def _parse_float(value: str) -> float | None:
    try:
        return float(value)
    except ValueError:
        return None


def load_csv(
    path: str | Path,
    target_column: str,
    schema: dict[str, RawColumnSpec] | str | Path | None = None,
) -> RawTable:
    """Read a comma-separated, header-first, UTF-8 file with a binary target column."""
    path = Path(path)
    if schema is not None and not isinstance(schema, dict):
        schema = load_schema(schema)
    schema = schema or {}
    try:
        with path.open(newline="", encoding="utf-8-sig") as fh:
            rows = list(csv.reader(fh))
    except FileNotFoundError as exc:
        raise IngestionError(f"{path}: file not found") from exc
    except (csv.Error, UnicodeDecodeError) as exc:
        raise IngestionError(f"{path}: unparsable CSV ({exc})") from exc
    if not rows:
        raise IngestionError(f"{path}: empty file")
    header = [h.strip() for h in rows[0]]
    if len(set(header)) != len(header):
        dupes = sorted({h for h in header if header.count(h) > 1})
        raise IngestionError(f"{path}: duplicate column names {dupes}")
    if target_column not in header:
        raise IngestionError(f"{path}: target column {target_column!r} not found in {header}")
    body = rows[1:]
    for line, row in enumerate(body, start=2):
        if len(row) != len(header):
            raise IngestionError(f"{path}: line {line} has {len(row)} fields, expected {len(header)}")

    def spec_for(name: str) -> RawColumnSpec:
        return schema.get(name, RawColumnSpec(name))

    t = header.index(target_column)
    t_missing = set(spec_for(target_column).missing)
    target_raw = []
    for line, row in enumerate(body, start=2):
        value = row[t].strip()
        if value in t_missing:
            raise IngestionError(f"{path}: missing target value at line {line}, column {target_column!r}")
        target_raw.append(value)
    classes = list(dict.fromkeys(target_raw))
    if len(classes) != 2:
        raise IngestionError(f"{path}: target {target_column!r} must have exactly 2 classes, found {classes}")
    numeric = [_parse_float(c) for c in classes]
    if all(v is not None for v in numeric):
        classes.sort(key=float)
    else:
        classes.sort()
    y = np.array([classes.index(v) for v in target_raw], dtype=np.int64)

    columns: dict[str, np.ndarray | list] = {}
    kinds: dict[str, ColumnKind] = {}
    for j, name in enumerate(header):
        if j == t:
            continue
        spec = spec_for(name)
        miss = set(spec.missing)
        raw = [row[j].strip() for row in body]
        vals = [None if v in miss else v for v in raw]
        parsed = [None if v is None else _parse_float(v) for v in vals]
        kind = spec.kind
        if kind is None:
            present = [p for v, p in zip(vals, parsed) if v is not None]
            kind = ColumnKind.NUMERIC if all(p is not None for p in present) else ColumnKind.CATEGORICAL
        if kind is ColumnKind.NUMERIC:
            for line, (v, p) in enumerate(zip(vals, parsed), start=2):
                if v is not None and p is None:
                    raise IngestionError(f"{path}: line {line}, column {name!r}: {v!r} is not numeric")
            columns[name] = np.array([np.nan if p is None else p for p in parsed], dtype=np.float64)
        else:
            columns[name] = vals
        kinds[name] = kind
    return RawTable(columns, kinds, y, target_column, (classes[0], classes[1]), name=path.stem)


def _standardize(col: np.ndarray) -> np.ndarray:
    mu = col.mean()
    sd = col.std()
    if sd == 0 or not np.isfinite(sd):
        return np.zeros_like(col)
    return (col - mu) / sd


def preprocess(raw: RawTable) -> Table:
    """Impute, encode and standardise every feature column into a numeric :class:`Table`.

    Numeric gaps take the column mean; categorical values are coded by order
    of first appearance with missing values in their own trailing code.  All
    columns end up with mean 0 and variance 1 (constant columns become 0).
    Columns with no observed value are dropped and noted in ``Table.notes``.
    """
    features, names, notes = [], [], []
    for name, values in raw.columns.items():
        if raw.kinds[name] is ColumnKind.NUMERIC:
            col = np.asarray(values, dtype=np.float64)
            observed = ~np.isnan(col)
            if not observed.any():
                notes.append(f"dropped all-missing column {name!r}")
                continue
            col = np.where(observed, col, col[observed].mean())
        else:
            present = [v for v in values if v is not None]
            if not present:
                notes.append(f"dropped all-missing column {name!r}")
                continue
            codes = {v: i for i, v in enumerate(dict.fromkeys(present))}
            col = np.array([codes[v] if v is not None else len(codes) for v in values], dtype=np.float64)
        features.append(_standardize(col))
        names.append(name)
    for note in notes:
        log.warning("%s: %s", raw.name, note)
    X = np.column_stack(features) if features else np.zeros((raw.n_rows, 0))
    return Table(X, raw.y.copy(), name=raw.name, feature_names=names, notes=notes)


def standardize_by_support(support_x: np.ndarray, target_x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Standardise both arrays with per-column statistics of the support rows only (axis -2)."""
    mu = support_x.mean(axis=-2, keepdims=True)
    sd = support_x.std(axis=-2, keepdims=True)
    sd = np.where(sd > 0, sd, 1.0)
    return (support_x - mu) / sd, (target_x - mu) / sd


def standardize_episode(episode: Episode) -> Episode:
    """Copy of ``episode`` whose table is standardised with support-row statistics."""
    X = episode.table.X
    _, scaled = standardize_by_support(X[episode.support_idx], X)
    table = replace(episode.table, X=scaled)
    return replace(episode, table=table)


def subsample_table(table: Table, max_rows: int, rng) -> Table:
    """Stratified random subset of at most ``max_rows`` rows (original order kept)."""
    if table.n_rows <= max_rows:
        return table
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    keep = []
    for c in (0, 1):
        rows = np.flatnonzero(table.y == c)
        k = int(round(max_rows * len(rows) / table.n_rows))
        keep.append(rng.choice(rows, size=min(k, len(rows)), replace=False))
    idx = np.sort(np.concatenate(keep))
    return Table(table.X[idx], table.y[idx], name=table.name, feature_names=list(table.feature_names))
