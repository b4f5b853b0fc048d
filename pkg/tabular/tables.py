# tabular/tables.py
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np
import pandas as pd

from core.exceptions import PopSynthError

from .schema import LevelError, Schema, SchemaError


PROPORTION_TOL = 1e-9


class EmptyTableError(PopSynthError):
    pass


def _frozen_codes(codes, n_cols: int) -> np.ndarray:
    arr = np.asarray(codes, dtype=np.int64)
    if arr.ndim != 2 and arr.size == 0:
        arr = arr.reshape(0, n_cols)
    if arr.ndim != 2 or arr.shape[1] != n_cols:
        raise SchemaError(f"Expected a 2-D code array with {n_cols} columns, got shape {arr.shape}")
    arr = np.ascontiguousarray(arr)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class RecordTable:
    """
    Rows of category indices under a Schema. Continuous attributes are already binned.

    `codes` is an (n_rows, n_attributes) int64 array, read-only.
    """

    schema: Schema
    codes: np.ndarray

    def __post_init__(self):
        codes = _frozen_codes(self.codes, len(self.schema))
        if codes.size:
            card = np.asarray(self.schema.cardinalities, dtype=np.int64)
            bad = (codes < 0) | (codes >= card)
            if bad.any():
                row, col = map(int, np.argwhere(bad)[0])
                attr = self.schema.attributes[col]
                raise LevelError(
                    f"{attr.label}: cell index {int(codes[row, col])} at row {row} "
                    f"outside 0..{attr.cardinality - 1}"
                )
        object.__setattr__(self, "codes", codes)

    def __len__(self) -> int:
        return int(self.codes.shape[0])

    @property
    def n_rows(self) -> int:
        return len(self)

    @property
    def labels(self) -> tuple[str, ...]:
        return self.schema.labels

    def column(self, label: str) -> np.ndarray:
        return self.codes[:, self.schema.index(label)]

    def select(self, labels: Sequence[str]) -> "RecordTable":
        idx = self.schema.indices(labels)
        return RecordTable(self.schema.subset(labels), self.codes[:, idx])

    def take(self, rows) -> "RecordTable":
        return RecordTable(self.schema, self.codes[np.asarray(rows, dtype=np.int64)])

    def rows(self) -> list[tuple[int, ...]]:
        return [tuple(int(v) for v in r) for r in self.codes]

    @classmethod
    def empty(cls, schema: Schema) -> "RecordTable":
        return cls(schema, np.zeros((0, len(schema)), dtype=np.int64))

    @classmethod
    def from_rows(cls, schema: Schema, rows: Iterable[Sequence[int]]) -> "RecordTable":
        rows = list(rows)
        if not rows:
            return cls.empty(schema)
        return cls(schema, np.asarray(rows, dtype=np.int64))

    @classmethod
    def concat(cls, tables: Sequence["RecordTable"]) -> "RecordTable":
        if not tables:
            raise ValueError("concat needs at least one table")
        schema = tables[0].schema
        for t in tables[1:]:
            if t.schema.labels != schema.labels:
                raise SchemaError(f"Cannot concatenate tables with labels {t.schema.labels} and {schema.labels}")
        return cls(schema, np.concatenate([t.codes for t in tables], axis=0))

    def to_frame(self, *, as_labels: bool = True) -> pd.DataFrame:
        """Level strings per cell (or raw indices with as_labels=False)."""
        data = {}
        for j, attr in enumerate(self.schema.attributes):
            col = self.codes[:, j]
            data[attr.label] = np.asarray(attr.categories, dtype=object)[col] if as_labels else col
        return pd.DataFrame(data, columns=list(self.schema.labels))


@dataclass(frozen=True)
class ContingencyTable:
    """
    Sparse counts over category-index tuples. Counts are reals so the same type
    carries IPF weights.
    """

    axes: tuple[str, ...]
    cells: Mapping[tuple[int, ...], float] = field(default_factory=dict)

    def __post_init__(self):
        axes = tuple(self.axes)
        cells = {}
        for key, value in dict(self.cells).items():
            key = tuple(int(k) for k in (key if isinstance(key, tuple) else (key,)))
            if len(key) != len(axes):
                raise SchemaError(f"Cell {key} has arity {len(key)}, table axes are {axes}")
            value = float(value)
            if not math.isfinite(value) or value < 0:
                raise ValueError(f"Cell {key} has invalid count {value}")
            cells[key] = value
        object.__setattr__(self, "axes", axes)
        object.__setattr__(self, "cells", cells)

    def __len__(self) -> int:
        return len(self.cells)

    @property
    def total(self) -> float:
        return float(math.fsum(self.cells.values()))

    def get(self, key: tuple[int, ...], default: float = 0.0) -> float:
        return self.cells.get(tuple(key), default)

    def assert_integral(self, tol: float = 1e-9) -> None:
        for key, v in self.cells.items():
            if abs(v - round(v)) > tol:
                raise ValueError(f"Cell {key} holds non-integral count {v}")

    def arrays(self) -> tuple[np.ndarray, np.ndarray]:
        """(keys, values) as aligned arrays in sorted key order."""
        keys = sorted(self.cells)
        k = np.asarray(keys, dtype=np.int64).reshape(len(keys), len(self.axes))
        v = np.asarray([self.cells[x] for x in keys], dtype=float)
        return k, v

    @classmethod
    def from_arrays(cls, axes: Sequence[str], keys: np.ndarray, values: np.ndarray) -> "ContingencyTable":
        return cls(tuple(axes), {tuple(int(x) for x in k): float(v) for k, v in zip(keys, values)})


@dataclass(frozen=True)
class DistributionVector:
    """Cell proportions x_i over a joint category space; proportions sum to 1."""

    axes: tuple[str, ...]
    cells: Mapping[tuple[int, ...], float] = field(default_factory=dict)

    def __post_init__(self):
        axes = tuple(self.axes)
        cells = {tuple(int(k) for k in key): float(v) for key, v in dict(self.cells).items()}
        if cells:
            if any(v < 0 or not math.isfinite(v) for v in cells.values()):
                raise ValueError("Proportions must be finite and non-negative.")
            s = math.fsum(cells.values())
            if abs(s - 1.0) > PROPORTION_TOL:
                raise ValueError(f"Proportions sum to {s}, expected 1.")
        object.__setattr__(self, "axes", axes)
        object.__setattr__(self, "cells", cells)

    def __len__(self) -> int:
        return len(self.cells)

    @property
    def group_count(self) -> int:
        return len(self.cells)

    def get(self, key: tuple[int, ...]) -> float:
        return self.cells.get(tuple(key), 0.0)

    def aligned(self, other: "DistributionVector") -> tuple[list[tuple[int, ...]], np.ndarray, np.ndarray]:
        """Union of keys with absent cells read as zero."""
        if self.axes != other.axes:
            raise SchemaError(f"Cannot align distributions over {self.axes} and {other.axes}")
        keys = sorted(set(self.cells) | set(other.cells))
        a = np.asarray([self.cells.get(k, 0.0) for k in keys], dtype=float)
        b = np.asarray([other.cells.get(k, 0.0) for k in keys], dtype=float)
        return keys, a, b
