# ipf/constraints.py
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import pandas as pd

from composition.households import (
    ComposedTable,
    Households,
    InfeasibleError,
    Persons,
    household_index,
    size_attribute,
    size_codes,
)
from composition.services import decompose
from tabular.schema import HOUSEHOLD, PERSON, Schema, SchemaError
from tabular.tables import RecordTable

logger = logging.getLogger(__name__)

TARGET_COLUMN = "target"


class InfeasibleTargetError(InfeasibleError):
    pass


@dataclass(frozen=True)
class MarginalConstraint:
    """
    Target counts over a few attributes. `level` says what is counted: households, or
    persons (whose household attributes may appear among the axes).
    """

    axes: tuple[str, ...]
    targets: Mapping[tuple[int, ...], float]
    level: str = HOUSEHOLD
    name: str = ""

    def __post_init__(self):
        axes = tuple(self.axes)
        if not axes:
            raise SchemaError("A marginal constraint needs at least one axis")
        if self.level not in (HOUSEHOLD, PERSON):
            raise SchemaError(f"Constraint level must be {HOUSEHOLD!r} or {PERSON!r}, got {self.level!r}")
        targets = {}
        for key, value in dict(self.targets).items():
            key = tuple(int(k) for k in (key if isinstance(key, tuple) else (key,)))
            if len(key) != len(axes):
                raise SchemaError(f"Target key {key} does not match axes {axes}")
            value = float(value)
            if not math.isfinite(value) or value < 0:
                raise ValueError(f"Target for {key} must be finite and >= 0, got {value}")
            targets[key] = targets.get(key, 0.0) + value
        if not any(v > 0 for v in targets.values()):
            raise ValueError(f"Constraint over {axes} has no positive target")
        object.__setattr__(self, "axes", axes)
        object.__setattr__(self, "targets", targets)
        if not self.name:
            object.__setattr__(self, "name", "x".join(axes))

    @property
    def total(self) -> float:
        return math.fsum(self.targets.values())

    def arrays(self) -> tuple[np.ndarray, np.ndarray]:
        keys = sorted(self.targets)
        return np.asarray(keys, dtype=np.int64).reshape(len(keys), len(self.axes)), np.asarray(
            [self.targets[k] for k in keys], dtype=float
        )

    def describe(self, key: Sequence[int], schema: Schema) -> str:
        return ", ".join(f"{a}={schema.get(a).categories[c]!r}" for a, c in zip(self.axes, key))

    @classmethod
    def from_frame(cls, frame: pd.DataFrame, schema: Schema, *, level: str | None = None,
                   name: str = "") -> "MarginalConstraint":
        """Category columns (level names) plus a `target` column."""
        if TARGET_COLUMN not in frame.columns:
            raise SchemaError(f"Marginal table {name or ''} has no {TARGET_COLUMN!r} column")
        axes = tuple(c for c in frame.columns if c != TARGET_COLUMN)
        attrs = [schema.get(a) for a in axes]
        if level is None:
            level = PERSON if any(a.level == PERSON for a in attrs) else HOUSEHOLD
        targets: dict[tuple[int, ...], float] = {}
        values = pd.to_numeric(frame[TARGET_COLUMN], errors="raise").to_numpy(dtype=float)
        cats = frame[list(axes)].astype(str).apply(lambda s: s.str.strip())
        for row, value in zip(cats.itertuples(index=False, name=None), values):
            key = tuple(attr.code_of(c) for attr, c in zip(attrs, row))
            targets[key] = targets.get(key, 0.0) + value
        return cls(axes, targets, level, name)

    def to_frame(self, schema: Schema) -> pd.DataFrame:
        keys, values = self.arrays()
        data = {a: [schema.get(a).categories[c] for c in keys[:, j]] for j, a in enumerate(self.axes)}
        data[TARGET_COLUMN] = values
        return pd.DataFrame(data, columns=list(self.axes) + [TARGET_COLUMN])


def read_marginal(path, schema: Schema, *, level: str | None = None) -> MarginalConstraint:
    path = Path(path)
    if not path.exists():
        raise SchemaError(f"Marginal file not found: {path}")
    frame = pd.read_csv(path, dtype=str, keep_default_na=False)
    frame.columns = [str(c).strip() for c in frame.columns]
    return MarginalConstraint.from_frame(frame, schema, level=level, name=path.stem)


def write_marginal(path, constraint: MarginalConstraint, schema: Schema) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    constraint.to_frame(schema).to_csv(path, index=False, lineterminator="\n")
    return path


@dataclass(frozen=True)
class WeightedSample:
    """
    Household units with one weight each: household attribute rows, member rows and
    the household row index (`owner`) of every member.
    """

    households: RecordTable
    persons: RecordTable
    owner: np.ndarray
    weights: np.ndarray
    ids: np.ndarray | None = field(default=None)

    def __post_init__(self):
        owner = np.asarray(self.owner, dtype=np.int64)
        weights = np.asarray(self.weights, dtype=float)
        n = len(self.households)
        if weights.shape != (n,):
            raise ValueError(f"{weights.shape[0] if weights.ndim else 0} weights for {n} households")
        if (weights < 0).any() or not np.isfinite(weights).all():
            raise ValueError("Weights must be finite and non-negative")
        if owner.shape != (len(self.persons),):
            raise ValueError("owner must hold one household index per member row")
        if owner.size and (owner.min() < 0 or owner.max() >= n):
            raise ValueError("owner references a household outside the sample")
        object.__setattr__(self, "owner", owner)
        object.__setattr__(self, "weights", weights)

    def __len__(self) -> int:
        return len(self.households)

    def with_weights(self, weights) -> "WeightedSample":
        return WeightedSample(self.households, self.persons, self.owner, weights, self.ids)

    def categories(self, constraint: MarginalConstraint) -> tuple[np.ndarray, np.ndarray]:
        """
        (codes, unit) for a constraint: one category row per counted unit, and the
        household each unit belongs to.
        """
        if constraint.level == HOUSEHOLD:
            missing = [a for a in constraint.axes if a not in self.households.schema]
            if missing:
                raise SchemaError(f"Household constraint {constraint.name} uses non-household axes {missing}")
            return self.households.select(constraint.axes).codes, np.arange(len(self))

        cols = []
        for a in constraint.axes:
            if a in self.persons.schema:
                cols.append(self.persons.column(a))
            elif a in self.households.schema:
                cols.append(self.households.column(a)[self.owner])
            else:
                raise SchemaError(f"Constraint {constraint.name} axis {a!r} is neither a household nor a person attribute")
        codes = np.column_stack(cols) if cols else np.zeros((len(self.persons), 0), dtype=np.int64)
        return codes, self.owner

    def schema_for(self, constraint: MarginalConstraint) -> Schema:
        attrs = []
        for a in constraint.axes:
            attrs.append(self.persons.schema.get(a) if a in self.persons.schema else self.households.schema.get(a))
        return Schema(tuple(attrs))

    @classmethod
    def from_households(cls, households: Households, persons: Persons, weights=None, *,
                        size_label: str | None = None, threshold: int | None = None) -> "WeightedSample":
        """Optionally appends the derived household-size attribute `size_label`."""
        owner = household_index(households, persons)
        records = households.records
        if size_label:
            if threshold is None:
                raise ValueError("A derived size attribute needs the size threshold")
            sizes = np.bincount(owner, minlength=len(households))
            if (sizes == 0).any():
                raise ValueError("Households without members cannot carry a size attribute")
            attr = size_attribute(size_label, threshold)
            records = RecordTable(
                Schema(records.schema.attributes + (attr,)),
                np.column_stack([records.codes, size_codes(sizes, threshold)]),
            )
        w = np.ones(len(households)) if weights is None else weights
        return cls(records, persons.records, owner, w, households.ids)

    @classmethod
    def from_composed(cls, composed: ComposedTable, weights=None, *, size_label: str | None = None,
                      threshold: int | None = None) -> "WeightedSample":
        households, persons = decompose(composed, id_prefix="S")
        return cls.from_households(households, persons, weights, size_label=size_label,
                                   threshold=threshold if threshold is not None else composed.size)


def write_weights(path, sample: WeightedSample) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    ids = sample.ids if sample.ids is not None else np.arange(1, len(sample) + 1)
    pd.DataFrame({"household_id": ids, "weight": sample.weights}).to_csv(
        path, index=False, lineterminator="\n", float_format="%.10g"
    )
    return path
