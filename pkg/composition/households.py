# composition/households.py
from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import pandas as pd

from core.exceptions import PopSynthError
from tabular.schema import HOUSEHOLD, AttributeSpec, Schema, SchemaError
from tabular.tables import RecordTable


class ReferentialIntegrityError(PopSynthError):
    pass


class InfeasibleError(PopSynthError):
    pass


def _ids(values) -> np.ndarray:
    arr = np.asarray([str(v) for v in values], dtype=object)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class Households:
    ids: np.ndarray
    records: RecordTable

    def __post_init__(self):
        ids = _ids(self.ids)
        if len(ids) != len(self.records):
            raise SchemaError(f"{len(ids)} household ids for {len(self.records)} household rows")
        object.__setattr__(self, "ids", ids)

    def __len__(self) -> int:
        return len(self.records)

    @property
    def schema(self) -> Schema:
        return self.records.schema

    def take(self, rows) -> "Households":
        rows = np.asarray(rows, dtype=np.int64)
        return Households(self.ids[rows], self.records.take(rows))

    def require_unique_ids(self) -> None:
        ids = pd.Index(self.ids)
        if not ids.is_unique:
            dupes = ids[ids.duplicated()].unique()[:5].tolist()
            raise ReferentialIntegrityError(f"Duplicate household ids: {dupes}")


@dataclass(frozen=True)
class Persons:
    household_ids: np.ndarray
    records: RecordTable

    def __post_init__(self):
        ids = _ids(self.household_ids)
        if len(ids) != len(self.records):
            raise SchemaError(f"{len(ids)} household ids for {len(self.records)} person rows")
        object.__setattr__(self, "household_ids", ids)

    def __len__(self) -> int:
        return len(self.records)

    @property
    def schema(self) -> Schema:
        return self.records.schema

    def take(self, rows) -> "Persons":
        rows = np.asarray(rows, dtype=np.int64)
        return Persons(self.household_ids[rows], self.records.take(rows))


def household_index(households: Households, persons: Persons) -> np.ndarray:
    """Row index of each person's household; raises on dangling ids."""
    households.require_unique_ids()
    idx = pd.Index(households.ids).get_indexer(persons.household_ids)
    if (idx < 0).any():
        dangling = sorted(set(persons.household_ids[idx < 0]))[:5]
        raise ReferentialIntegrityError(f"Persons reference unknown household ids: {dangling}")
    return idx.astype(np.int64)


# --------------------
# Household size as a derived attribute
# --------------------

def size_levels(threshold: int) -> tuple[str, ...]:
    return tuple(str(k) for k in range(1, threshold + 1)) + (f"{threshold + 1}+",)


def size_attribute(label: str, threshold: int) -> AttributeSpec:
    return AttributeSpec(label, level=HOUSEHOLD, levels=size_levels(threshold))


def size_codes(sizes: np.ndarray, threshold: int) -> np.ndarray:
    """Size k -> code k-1, anything above the threshold -> the overflow code."""
    sizes = np.asarray(sizes, dtype=np.int64)
    if (sizes < 1).any():
        raise ValueError("Household size codes need sizes >= 1")
    return np.minimum(sizes, threshold + 1) - 1


# --------------------
# Composed (household + members) tables
# --------------------

def member_label(label: str, member: int) -> str:
    return f"{label}_{member}"


def composed_schema(household_schema: Schema, person_schema: Schema, size: int) -> Schema:
    if size < 1:
        raise ValueError(f"Household size must be >= 1, got {size}")
    attrs = list(household_schema.attributes)
    for i in range(1, size + 1):
        attrs.extend(a.relabel(member_label(a.label, i)) for a in person_schema.attributes)
    return Schema(tuple(attrs))


_SUFFIX = re.compile(r"^(?P<base>.+)_(?P<member>[1-9][0-9]*)$")


def parse_composed_labels(labels: Sequence[str], household_schema: Schema, person_schema: Schema,
                          size: int | None = None) -> int:
    """
    Household size implied by a composed header; raises SchemaError when the
    columns are not exactly household attrs followed by member blocks _1.._k.

    Without person attributes the header carries no member columns, so `size` must be
    given; otherwise it is checked against the header.
    """
    labels = list(labels)
    n_h = len(household_schema)
    if labels[:n_h] != list(household_schema.labels):
        raise SchemaError(f"Composed columns must start with {list(household_schema.labels)}, got {labels[:n_h]}")

    member_cols = labels[n_h:]
    p = len(person_schema)
    if p == 0:
        if member_cols:
            raise SchemaError(f"Unexpected member columns {member_cols} for an empty person schema")
        if size is None:
            raise SchemaError("Cannot infer household size without person attributes")
        if size < 1:
            raise SchemaError(f"Household size must be >= 1, got {size}")
        return size
    if not member_cols or len(member_cols) % p:
        raise SchemaError(f"{len(member_cols)} member columns do not split into blocks of {p}")

    found = len(member_cols) // p
    for pos, col in enumerate(member_cols):
        m = _SUFFIX.match(col)
        want_member = pos // p + 1
        want_base = person_schema.labels[pos % p]
        if not m or m.group("base") != want_base or int(m.group("member")) != want_member:
            raise SchemaError(f"Malformed member column {col!r}; expected {member_label(want_base, want_member)!r}")
    if size is not None and size != found:
        raise SchemaError(f"Header describes households of size {found}, expected {size}")
    return found


@dataclass(frozen=True)
class ComposedTable:
    """
    One row per household of exactly `size` members: household attributes then
    person attributes suffixed _1.._k, member blocks in canonical order.
    """

    size: int
    household_schema: Schema
    person_schema: Schema
    records: RecordTable
    household_ids: np.ndarray | None = field(default=None)

    def __post_init__(self):
        expected = composed_schema(self.household_schema, self.person_schema, self.size)
        if self.records.schema.labels != expected.labels:
            raise SchemaError(
                f"Composed records for size {self.size} must have columns {list(expected.labels)}, "
                f"got {list(self.records.schema.labels)}"
            )
        if self.household_ids is not None:
            ids = _ids(self.household_ids)
            if len(ids) != len(self.records):
                raise SchemaError("household_ids length does not match composed rows")
            object.__setattr__(self, "household_ids", ids)

    def __len__(self) -> int:
        return len(self.records)

    @property
    def schema(self) -> Schema:
        return self.records.schema

    @property
    def width(self) -> int:
        return len(self.records.schema)

    def member_labels(self, base_labels: Sequence[str]) -> list[str]:
        """Composed labels of the given person attributes for every member, member-major."""
        return [member_label(lb, i) for i in range(1, self.size + 1) for lb in base_labels]

    def with_records(self, records: RecordTable, household_ids=None) -> "ComposedTable":
        return ComposedTable(self.size, self.household_schema, self.person_schema, records, household_ids)

    @classmethod
    def from_records(cls, records: RecordTable, household_schema: Schema, person_schema: Schema,
                     household_ids=None, *, size: int | None = None) -> "ComposedTable":
        size = parse_composed_labels(records.labels, household_schema, person_schema, size)
        return cls(size, household_schema, person_schema, records, household_ids)


def composed_width(n_household_attrs: int, n_person_attrs: int, size: int) -> int:
    return n_household_attrs + size * n_person_attrs
