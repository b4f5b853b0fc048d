# tabular/services.py
from __future__ import annotations

import math
from collections import defaultdict
from typing import Sequence

import numpy as np

from .schema import AttributeSpec, RangeError, SchemaError
from .tables import ContingencyTable, DistributionVector, EmptyTableError, RecordTable


# --------------------
# Binning
# --------------------

def bin_continuous(value: float, spec: AttributeSpec) -> int:
    """Index i with edges[i] <= value < edges[i+1]; the last bin is closed on the right."""
    if not spec.is_continuous:
        raise SchemaError(f"{spec.label} is categorical; nothing to bin.")
    v = float(value)
    if math.isnan(v) or v < spec.min or v > spec.max:
        raise RangeError(f"{spec.label}: value {value!r} outside [{spec.min}, {spec.max}]")
    edges = np.asarray(spec.bin_edges, dtype=float)
    i = int(np.searchsorted(edges, v, side="right")) - 1
    return min(i, spec.cardinality - 1)


def bin_values(values, spec: AttributeSpec) -> np.ndarray:
    """Vectorised bin_continuous over an array of decimals."""
    if not spec.is_continuous:
        raise SchemaError(f"{spec.label} is categorical; nothing to bin.")
    v = np.asarray(values, dtype=float)
    bad = np.isnan(v) | (v < spec.min) | (v > spec.max)
    if bad.any():
        first = v[np.argmax(bad)]
        raise RangeError(f"{spec.label}: value {first!r} outside [{spec.min}, {spec.max}]")
    edges = np.asarray(spec.bin_edges, dtype=float)
    idx = np.searchsorted(edges, v, side="right") - 1
    return np.minimum(idx, spec.cardinality - 1).astype(np.int64)


# --------------------
# Tabulation
# --------------------

def count_rows(codes: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Unique rows of a 2-D code array with their multiplicities (rows in sorted order)."""
    codes = np.asarray(codes, dtype=np.int64)
    if codes.shape[0] == 0:
        return codes.reshape(0, codes.shape[1] if codes.ndim == 2 else 0), np.zeros(0, dtype=np.int64)
    if codes.shape[1] == 0:
        return np.zeros((1, 0), dtype=np.int64), np.asarray([codes.shape[0]], dtype=np.int64)
    keys, counts = np.unique(codes, axis=0, return_counts=True)
    return keys, counts


def tabulate(records: RecordTable, axes: Sequence[str]) -> ContingencyTable:
    axes = tuple(axes)
    unknown = [a for a in axes if a not in records.schema]
    if unknown:
        raise SchemaError(f"Unknown axis labels {unknown}; schema has {list(records.schema.labels)}")
    idx = records.schema.indices(axes)
    keys, counts = count_rows(records.codes[:, idx])
    return ContingencyTable.from_arrays(axes, keys, counts)


def normalize(table: ContingencyTable) -> DistributionVector:
    total = table.total
    if total <= 0:
        raise EmptyTableError(f"Cannot normalize an empty table over {table.axes}")
    return DistributionVector(
        table.axes,
        {k: v / total for k, v in table.cells.items() if v > 0},
    )


def distribution(records: RecordTable, axes: Sequence[str]) -> DistributionVector:
    return normalize(tabulate(records, axes))


def _project_cells(cells: dict, axes: tuple[str, ...], subset: Sequence[str]) -> dict:
    subset = tuple(subset)
    if not subset:
        raise ValueError("Projection needs a non-empty axis subset.")
    missing = [a for a in subset if a not in axes]
    if missing:
        raise SchemaError(f"Axes {missing} not in {axes}")
    pos = [axes.index(a) for a in subset]
    acc: dict[tuple[int, ...], list[float]] = defaultdict(list)
    for key, v in cells.items():
        acc[tuple(key[p] for p in pos)].append(v)
    return {k: math.fsum(vs) for k, vs in acc.items()}


def project(dist: DistributionVector, subset: Sequence[str]) -> DistributionVector:
    """Marginalise proportions onto `subset` (in the order given)."""
    return DistributionVector(tuple(subset), _project_cells(dist.cells, dist.axes, subset))


def project_counts(table: ContingencyTable, subset: Sequence[str]) -> ContingencyTable:
    return ContingencyTable(tuple(subset), _project_cells(table.cells, table.axes, subset))
