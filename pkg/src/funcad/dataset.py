"""Functional observations, long-format CSV I/O and segmentation.

A functional dataset is a list of equal-length multivariate series. On disk
it is stored in long format, one row per sample::

    series_id,t,X1,X2
    s0000,0,0.12,1.03
    s0000,1,0.31,0.98
    ...

Ground-truth labels live in a separate ``series_id,group`` file.
"""

from __future__ import annotations

import csv
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import pandas as pd

from .errors import ArgumentError, SchemaError, StructuralError, ValidationError


def _frozen(values: np.ndarray) -> np.ndarray:
    arr = np.array(values, dtype=float, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class FunctionalSeries:
    """One observation: a ``T x m`` block of samples."""

    id: str
    values: np.ndarray
    channel_names: tuple[str, ...]

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        if values.ndim == 1:
            values = values[:, None]
        if values.ndim != 2:
            raise StructuralError(f"series {self.id!r}: values must be a T x m matrix")
        T, m = values.shape
        if T < 2 or m < 1:
            raise StructuralError(f"series {self.id!r}: need T >= 2 and m >= 1, got {values.shape}")
        if len(self.channel_names) != m:
            raise StructuralError(
                f"series {self.id!r}: {m} channels but {len(self.channel_names)} channel names"
            )
        if not np.all(np.isfinite(values)):
            t, c = np.argwhere(~np.isfinite(values))[0]
            raise ValidationError(f"series {self.id!r}: non-finite value at t={t}, channel {c}")
        object.__setattr__(self, "values", _frozen(values))
        object.__setattr__(self, "channel_names", tuple(self.channel_names))

    @property
    def length(self) -> int:
        return self.values.shape[0]

    @property
    def n_channels(self) -> int:
        return self.values.shape[1]

    def channel(self, name: str) -> np.ndarray:
        return self.values[:, self.channel_names.index(name)]


@dataclass(frozen=True)
class FunctionalDataset:
    """A set of ``n`` series sharing ``T`` and the channel layout.

    ``labels`` are integer ground-truth groups (0 = normal) when known.
    ``meta`` carries one free-form dict per series (generators record the
    anomaly windows they used there).
    """

    series: tuple[FunctionalSeries, ...]
    labels: tuple[int, ...] | None = None
    meta: tuple[dict, ...] | None = field(default=None, compare=False)

    def __post_init__(self):
        series = tuple(self.series)
        if not series:
            raise StructuralError("dataset is empty")
        T, m = series[0].values.shape
        names = series[0].channel_names
        for s in series[1:]:
            if s.values.shape != (T, m):
                raise StructuralError(
                    f"series {s.id!r} has shape {s.values.shape}, expected {(T, m)}"
                )
            if s.channel_names != names:
                raise StructuralError(f"series {s.id!r} has channels {s.channel_names}, expected {names}")
        ids = [s.id for s in series]
        if len(set(ids)) != len(ids):
            raise StructuralError("series ids are not unique")
        object.__setattr__(self, "series", series)
        if self.labels is not None:
            labels = tuple(int(v) for v in self.labels)
            if len(labels) != len(series):
                raise StructuralError(f"{len(labels)} labels for {len(series)} series")
            object.__setattr__(self, "labels", labels)
        if self.meta is not None:
            meta = tuple(self.meta)
            if len(meta) != len(series):
                raise StructuralError(f"{len(meta)} metadata entries for {len(series)} series")
            object.__setattr__(self, "meta", meta)

    def __len__(self) -> int:
        return len(self.series)

    @property
    def length(self) -> int:
        return self.series[0].length

    @property
    def n_channels(self) -> int:
        return self.series[0].n_channels

    @property
    def channel_names(self) -> tuple[str, ...]:
        return self.series[0].channel_names

    @property
    def ids(self) -> list[str]:
        return [s.id for s in self.series]

    def to_array(self) -> np.ndarray:
        """Stack the dataset into an ``n x T x m`` array."""
        return np.stack([s.values for s in self.series])

    def subset(self, index: Sequence[int]) -> "FunctionalDataset":
        index = list(index)
        return FunctionalDataset(
            series=tuple(self.series[i] for i in index),
            labels=None if self.labels is None else tuple(self.labels[i] for i in index),
            meta=None if self.meta is None else tuple(self.meta[i] for i in index),
        )

    def with_labels(self, labels: Sequence[int] | Mapping[str, int]) -> "FunctionalDataset":
        if isinstance(labels, Mapping):
            missing = [i for i in self.ids if i not in labels]
            if missing:
                raise SchemaError(f"no label for series {missing[0]!r}")
            labels = [labels[i] for i in self.ids]
        return FunctionalDataset(self.series, tuple(labels), self.meta)


@dataclass(frozen=True)
class CsvSchema:
    """Column roles of a long-format CSV. ``channel_columns=None`` takes
    every remaining column, in file order."""

    id_column: str = "series_id"
    time_column: str = "t"
    channel_columns: tuple[str, ...] | None = None


@dataclass(frozen=True)
class SegmentationSpec:
    segment_length: int
    stride: int | None = None
    drop_incomplete_tail: bool = True

    def __post_init__(self):
        if self.stride is None:
            object.__setattr__(self, "stride", self.segment_length)
        if self.segment_length < 2:
            raise ArgumentError("segment_length must be >= 2")
        if self.stride < 1:
            raise ArgumentError("stride must be >= 1")


def load_csv(path: str | Path, schema: CsvSchema | None = None) -> FunctionalDataset:
    """Read a long-format CSV into a validated :class:`FunctionalDataset`.

    Series keep the order in which their ids first appear; samples are
    sorted by the time column, which must hold strictly increasing
    integers per id.
    """
    schema = schema or CsvSchema()
    path = Path(path)
    try:
        df = pd.read_csv(path, dtype={schema.id_column: str}, float_precision="round_trip")
    except pd.errors.EmptyDataError:
        raise SchemaError(f"{path}: file is empty") from None
    if df.columns.empty:
        raise SchemaError(f"{path}: no header")
    columns = list(df.columns)
    for col in (schema.id_column, schema.time_column):
        if col not in columns:
            raise SchemaError(f"{path}: unknown column {col!r} (header: {columns})")
    if schema.channel_columns is None:
        channels = [c for c in columns if c not in (schema.id_column, schema.time_column)]
    else:
        channels = list(schema.channel_columns)
        unknown = [c for c in channels if c not in columns]
        if unknown:
            raise SchemaError(f"{path}: unknown column {unknown[0]!r} (header: {columns})")
    if not channels:
        raise SchemaError(f"{path}: no channel columns")
    if df.empty:
        raise SchemaError(f"{path}: header only, no rows")

    for col in channels:
        numeric = pd.to_numeric(df[col], errors="coerce").to_numpy(dtype=float)
        bad = np.flatnonzero(~np.isfinite(numeric))
        if bad.size:
            # +2: header line and 1-based numbering
            raise ValidationError(
                f"{path}: non-finite or missing value in column {col!r} at line {bad[0] + 2}"
            )
        df[col] = numeric
    t = pd.to_numeric(df[schema.time_column], errors="coerce").to_numpy(dtype=float)
    bad = np.flatnonzero(~np.isfinite(t) | (t != np.round(t)))
    if bad.size:
        raise ValidationError(f"{path}: time column is not integer at line {bad[0] + 2}")
    df[schema.time_column] = t.astype(np.int64)

    series = []
    lengths = {}
    for sid, group in df.groupby(schema.id_column, sort=False):
        group = group.sort_values(schema.time_column, kind="stable")
        if not np.all(np.diff(group[schema.time_column].to_numpy()) > 0):
            raise StructuralError(f"{path}: series {sid!r} has repeated time stamps")
        lengths[sid] = len(group)
        series.append((str(sid), group[channels].to_numpy(dtype=float)))
    # most common length wins; ties go to the earliest series
    expected = Counter(lengths.values()).most_common(1)[0][0]
    for sid, n in lengths.items():
        if n != expected:
            raise StructuralError(
                f"{path}: series {sid!r} has {n} rows, other series have {expected}"
            )
    return FunctionalDataset(tuple(FunctionalSeries(sid, v, tuple(channels)) for sid, v in series))


def write_csv(dataset: FunctionalDataset, path: str | Path) -> None:
    """Write ``dataset`` in long format; floats use their shortest exact repr."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["series_id", "t", *dataset.channel_names])
        for s in dataset.series:
            for t, row in enumerate(s.values):
                writer.writerow([s.id, t, *map(repr, row.tolist())])


def load_labels(path: str | Path) -> dict[str, int]:
    df = pd.read_csv(path, dtype={"series_id": str})
    for col in ("series_id", "group"):
        if col not in df.columns:
            raise SchemaError(f"{path}: missing column {col!r}")
    return dict(zip(df["series_id"], df["group"].astype(int)))


def write_labels(ids: Sequence[str], labels: Sequence[int], path: str | Path, column: str = "group") -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["series_id", column])
        writer.writerows(zip(ids, (int(v) for v in labels)))


def segment(continuous: FunctionalSeries, spec: SegmentationSpec) -> FunctionalDataset:
    """Cut a continuous recording into fixed-length observations.

    Segment ``k`` covers samples ``[k*stride, k*stride + segment_length)``
    and gets the id ``"{parent_id}#k"``. With ``drop_incomplete_tail=False``
    a final window that would run past the end is shifted back so that it
    ends on the last sample; observations must stay equal-length.
    """
    T = continuous.length
    L = spec.segment_length
    if L > T:
        raise ArgumentError(f"segment_length {L} exceeds series length {T}")
    starts = list(range(0, T - L + 1, spec.stride))
    if not spec.drop_incomplete_tail and starts[-1] + L < T:
        starts.append(T - L)
    parts = tuple(
        FunctionalSeries(f"{continuous.id}#{k}", continuous.values[s : s + L], continuous.channel_names)
        for k, s in enumerate(starts)
    )
    return FunctionalDataset(parts, meta=tuple({"parent": continuous.id, "start": s} for s in starts))
