"""Long-format panel storage, group indexing, the within transformation and the temporal split."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from panelnn.errors import (
    DimensionError,
    EmptyInputError,
    InsufficientPeriodsError,
    ParseError,
    SchemaError,
)


@dataclass(frozen=True)
class GroupIndex:
    """Partition of rows into groups labelled 0..G-1.

    ``labels`` keeps the original label of each group so callers can map
    back (e.g. fixed effects keyed by the user's unit id).
    """

    group_of_row: np.ndarray
    labels: np.ndarray
    # rows sorted by group, and the start offset of every group in that order
    order: np.ndarray = field(repr=False)
    starts: np.ndarray = field(repr=False)
    counts: np.ndarray = field(repr=False)

    @property
    def group_count(self) -> int:
        return len(self.labels)

    @property
    def n_rows(self) -> int:
        return len(self.group_of_row)

    @property
    def rows_of_group(self) -> list[np.ndarray]:
        return np.split(self.order, self.starts[1:])

    def sums(self, M: np.ndarray) -> np.ndarray:
        """Per-group column sums, shape (G, cols)."""
        M = np.asarray(M, dtype=float)
        if M.shape[0] != self.n_rows:
            raise DimensionError(f"matrix has {M.shape[0]} rows, index has {self.n_rows}")
        return np.add.reduceat(M[self.order], self.starts, axis=0)

    def means(self, M: np.ndarray) -> np.ndarray:
        s = self.sums(M)
        return s / self.counts.reshape((-1,) + (1,) * (s.ndim - 1))

    def broadcast(self, per_group: np.ndarray) -> np.ndarray:
        return np.asarray(per_group)[self.group_of_row]


def group_index(labels: Sequence) -> GroupIndex:
    labels = np.asarray(labels)
    if labels.ndim != 1 or labels.size == 0:
        raise DimensionError("group labels must be a non-empty 1-d array")
    uniq, codes = np.unique(labels, return_inverse=True)
    order = np.argsort(codes, kind="stable")
    counts = np.bincount(codes, minlength=len(uniq))
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    return GroupIndex(
        group_of_row=codes, labels=uniq, order=order, starts=starts, counts=counts
    )


@dataclass(frozen=True)
class DemeanedView:
    matrix: np.ndarray
    group_means: np.ndarray

    def restore(self, idx: GroupIndex) -> np.ndarray:
        return self.matrix + idx.broadcast(self.group_means)


def within_transform(M: np.ndarray, idx: GroupIndex) -> DemeanedView:
    """Subtract group means from every column of ``M`` (vectors are accepted too)."""
    M = np.asarray(M, dtype=float)
    means = idx.means(M)
    return DemeanedView(matrix=M - idx.broadcast(means), group_means=means)


def demean(M: np.ndarray, idx: GroupIndex) -> np.ndarray:
    return within_transform(M, idx).matrix


@dataclass(frozen=True)
class PanelDataset:
    """One row per (unit, time) observation.

    ``unit_id`` holds the user's labels; ``unit_index`` is the contiguous
    0..n_units-1 remapping computed at construction.
    """

    unit_id: np.ndarray
    time: np.ndarray
    y: np.ndarray
    X: np.ndarray
    Z: np.ndarray
    cluster: np.ndarray | None = None
    x_names: tuple[str, ...] = ()
    z_names: tuple[str, ...] = ()

    def __post_init__(self):
        unit_id = np.asarray(self.unit_id).astype(np.int64)
        time = np.asarray(self.time).astype(np.int64)
        y = np.asarray(self.y, dtype=float).reshape(-1)
        X = np.asarray(self.X, dtype=float)
        Z = np.asarray(self.Z, dtype=float)
        n = len(y)
        if X.ndim == 1:
            X = X.reshape(n, -1) if n else X.reshape(0, 0)
        if Z.ndim == 1:
            Z = Z.reshape(n, -1) if n else Z.reshape(0, 0)
        cluster = unit_id if self.cluster is None else np.asarray(self.cluster).astype(np.int64)
        if n < 1:
            raise EmptyInputError("panel has no rows")
        for name, arr in (("unit_id", unit_id), ("time", time), ("X", X), ("Z", Z), ("cluster", cluster)):
            if arr.shape[0] != n:
                raise DimensionError(f"{name} has {arr.shape[0]} rows, expected {n}")
        for name, arr in (("y", y), ("X", X), ("Z", Z)):
            if not np.all(np.isfinite(arr)):
                raise ParseError(f"{name} contains non-finite values")
        x_names = tuple(self.x_names) or tuple(f"x{j + 1}" for j in range(X.shape[1]))
        z_names = tuple(self.z_names) or tuple(f"z{j + 1}" for j in range(Z.shape[1]))
        if len(x_names) != X.shape[1] or len(z_names) != Z.shape[1]:
            raise DimensionError("column names do not match matrix widths")
        for name, value in (
            ("unit_id", unit_id), ("time", time), ("y", y), ("X", X), ("Z", Z),
            ("cluster", cluster), ("x_names", x_names), ("z_names", z_names),
        ):
            if isinstance(value, np.ndarray):
                value.setflags(write=False)
            object.__setattr__(self, name, value)

    @property
    def n_rows(self) -> int:
        return len(self.y)

    @property
    def units(self) -> np.ndarray:
        return np.unique(self.unit_id)

    @property
    def n_units(self) -> int:
        return len(self.units)

    @property
    def unit_index(self) -> np.ndarray:
        return np.searchsorted(self.units, self.unit_id)

    def unit_groups(self) -> GroupIndex:
        return group_index(self.unit_id)

    def cluster_groups(self) -> GroupIndex:
        return group_index(self.cluster)

    def subset(self, rows) -> PanelDataset:
        rows = np.asarray(rows)
        return PanelDataset(
            unit_id=self.unit_id[rows],
            time=self.time[rows],
            y=self.y[rows],
            X=self.X[rows],
            Z=self.Z[rows],
            cluster=self.cluster[rows],
            x_names=self.x_names,
            z_names=self.z_names,
        )


@dataclass(frozen=True)
class CsvSchema:
    """Which CSV columns play which role."""

    id: str
    time: str
    y: str
    x: tuple[str, ...]
    z: tuple[str, ...]
    cluster: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "x", tuple(self.x))
        object.__setattr__(self, "z", tuple(self.z))
        overlap = set(self.x) & set(self.z)
        if overlap:
            raise SchemaError(f"columns listed as both X and Z: {sorted(overlap)}")
        if not self.z and not self.x:
            raise SchemaError("schema needs at least one X or Z column")


def _parse_float(text: str, column: str, line: int) -> float:
    text = text.strip()
    if not text:
        raise ParseError(f"line {line}: missing value in column {column!r}", row=line)
    try:
        value = float(text)
    except ValueError:
        raise ParseError(f"line {line}: non-numeric value {text!r} in column {column!r}", row=line) from None
    if not math.isfinite(value):
        raise ParseError(f"line {line}: non-finite value in column {column!r}", row=line)
    return value


def _parse_int(text: str, column: str, line: int) -> int:
    value = _parse_float(text, column, line)
    if value != int(value):
        raise ParseError(f"line {line}: column {column!r} must hold integers, got {text.strip()!r}", row=line)
    return int(value)


def read_columns(path: str | Path, schema: CsvSchema, extra: Sequence[str] = ()) -> tuple[PanelDataset, dict]:
    """Like :func:`load_csv` but also returns the integer columns named in ``extra``."""
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise EmptyInputError(f"{path} is empty")
        header = [h.strip() for h in header]
        wanted = [schema.id, schema.time, schema.y, *schema.x, *schema.z, *extra]
        if schema.cluster:
            wanted.append(schema.cluster)
        missing = [c for c in wanted if c not in header]
        if missing:
            raise SchemaError(f"{path}: missing column(s) {missing}")
        pos = {name: header.index(name) for name in wanted}
        ids, times, ys, xs, zs, cl = [], [], [], [], [], []
        ext = {name: [] for name in extra}
        for line, row in enumerate(reader, start=2):
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) != len(header):
                raise ParseError(f"line {line}: expected {len(header)} fields, got {len(row)}", row=line)
            ids.append(_parse_int(row[pos[schema.id]], schema.id, line))
            times.append(_parse_int(row[pos[schema.time]], schema.time, line))
            ys.append(_parse_float(row[pos[schema.y]], schema.y, line))
            xs.append([_parse_float(row[pos[c]], c, line) for c in schema.x])
            zs.append([_parse_float(row[pos[c]], c, line) for c in schema.z])
            if schema.cluster:
                cl.append(_parse_int(row[pos[schema.cluster]], schema.cluster, line))
            for name in extra:
                ext[name].append(_parse_int(row[pos[name]], name, line))
    if not ys:
        raise EmptyInputError(f"{path} has a header but no data rows")
    n = len(ys)
    data = PanelDataset(
        unit_id=np.array(ids),
        time=np.array(times),
        y=np.array(ys),
        X=np.array(xs, dtype=float).reshape(n, len(schema.x)),
        Z=np.array(zs, dtype=float).reshape(n, len(schema.z)),
        cluster=np.array(cl) if schema.cluster else None,
        x_names=schema.x,
        z_names=schema.z,
    )
    return data, {k: np.array(v) for k, v in ext.items()}


def load_csv(path: str | Path, schema: CsvSchema) -> PanelDataset:
    return read_columns(path, schema)[0]


def save_csv(data: PanelDataset, path: str | Path, id_name="unit", time_name="time", y_name="y",
             extra: dict | None = None) -> CsvSchema:
    """Write ``data`` so that :func:`load_csv` with the returned schema reads it back exactly.

    Floats are written with ``repr`` which round-trips binary64 values.
    """
    header = [id_name, time_name, y_name, *data.x_names, *data.z_names]
    extra = extra or {}
    header += list(extra)
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in range(data.n_rows):
            row = [str(data.unit_id[r]), str(data.time[r]), repr(float(data.y[r]))]
            row += [repr(float(v)) for v in data.X[r]]
            row += [repr(float(v)) for v in data.Z[r]]
            row += [repr(extra[k][r]) if isinstance(extra[k][r], float) else str(extra[k][r]) for k in extra]
            w.writerow(row)
    return CsvSchema(id=id_name, time=time_name, y=y_name, x=data.x_names, z=data.z_names)


@dataclass(frozen=True)
class PanelSplit:
    train: PanelDataset
    test: PanelDataset
    validation: PanelDataset

    def __iter__(self):
        return iter((self.train, self.test, self.validation))


def temporal_split(data: PanelDataset) -> PanelSplit:
    """Hold out the latest tenth of periods for validation; alternate the rest.

    Even time values go to training and odd ones to testing.
    """
    periods = np.unique(data.time)
    if len(periods) < 10:
        raise InsufficientPeriodsError(f"need at least 10 distinct periods, got {len(periods)}")
    n_val = len(periods) // 10
    val_periods = periods[-n_val:]
    is_val = np.isin(data.time, val_periods)
    is_train = ~is_val & (data.time % 2 == 0)
    is_test = ~is_val & (data.time % 2 != 0)
    parts = [np.flatnonzero(m) for m in (is_train, is_test, is_val)]
    if any(len(p) == 0 for p in parts):
        raise InsufficientPeriodsError("split produced an empty train, test or validation set")
    return PanelSplit(*(data.subset(p) for p in parts))


def split_by_codes(data: PanelDataset, codes: np.ndarray) -> PanelSplit:
    """Split using an explicit per-row code: 0 train, 1 test, 2 validation."""
    codes = np.asarray(codes)
    if set(np.unique(codes)) - {0, 1, 2}:
        raise SchemaError("split codes must be 0 (train), 1 (test) or 2 (validation)")
    parts = [np.flatnonzero(codes == k) for k in (0, 1, 2)]
    if len(parts[0]) == 0 or len(parts[1]) == 0:
        raise SchemaError("explicit split needs non-empty train and test sets")
    val = data.subset(parts[2]) if len(parts[2]) else None
    return PanelSplit(data.subset(parts[0]), data.subset(parts[1]), val)
