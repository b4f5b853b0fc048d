# composition/services.py
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from tabular.schema import Schema
from tabular.tables import RecordTable

from .households import (
    ComposedTable,
    Households,
    InfeasibleError,
    Persons,
    composed_schema,
    household_index,
)

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class MemberOrdering:
    """
    Canonical member order inside a household.

    Members sort by `primary` (descending by default), then by the remaining person
    attributes in schema order (ascending category index), then by input order.
    A primary label missing from the person schema is ignored.
    """

    primary: str | None = "AGEP"
    descending: bool = True


DEFAULT_ORDERING = MemberOrdering()


@dataclass
class SizeSplit:
    buckets: dict[int, tuple[Households, Persons]] = field(default_factory=dict)
    overflow: tuple[Households, Persons] | None = None
    empty_households: int = 0

    @property
    def sizes(self) -> list[int]:
        return sorted(self.buckets)


# --------------------
# Helpers
# --------------------

def _member_sort(person_codes: np.ndarray, owner: np.ndarray, person_schema: Schema,
                 ordering: MemberOrdering) -> np.ndarray:
    """Permutation grouping persons by owner row, members in canonical order."""
    n = person_codes.shape[0]
    keys = [np.arange(n)]  # input order, least significant

    primary_idx = None
    if ordering.primary and ordering.primary in person_schema:
        primary_idx = person_schema.index(ordering.primary)

    rest = [j for j in range(len(person_schema)) if j != primary_idx]
    for j in reversed(rest):
        keys.append(person_codes[:, j])
    if primary_idx is not None:
        col = person_codes[:, primary_idx]
        keys.append(-col if ordering.descending else col)
    keys.append(owner)
    return np.lexsort(keys)


def _member_blocks(owner: np.ndarray, n_owners: int) -> tuple[np.ndarray, np.ndarray]:
    """(order, starts) such that persons of owner h are order[starts[h]:starts[h+1]]."""
    order = np.argsort(owner, kind="stable")
    counts = np.bincount(owner, minlength=n_owners)
    starts = np.concatenate([[0], np.cumsum(counts)])
    return order, starts


# --------------------
# Operations
# --------------------

def compose_households(households: Households, persons: Persons, size: int,
                       ordering: MemberOrdering | None = None) -> ComposedTable:
    """
    One row per household with exactly `size` members: household attributes followed by
    the members' attributes suffixed _1.._k in canonical member order.
    """
    if size < 1:
        raise ValueError(f"Household size must be >= 1, got {size}")
    ordering = ordering or DEFAULT_ORDERING
    owner = household_index(households, persons)

    sizes = np.bincount(owner, minlength=len(households))
    empty = int((sizes == 0).sum())
    if empty:
        logger.warning("Skipped %s household(s) with zero members while composing size %s", empty, size)

    keep = np.flatnonzero(sizes == size)
    schema = composed_schema(households.schema, persons.schema, size)
    if keep.size == 0:
        return ComposedTable(size, households.schema, persons.schema, RecordTable.empty(schema), [])

    # Renumber kept households 0..n-1 in input order.
    remap = np.full(len(households), -1, dtype=np.int64)
    remap[keep] = np.arange(keep.size)
    person_mask = remap[owner] >= 0
    p_codes = persons.records.codes[person_mask]
    p_owner = remap[owner[person_mask]]

    perm = _member_sort(p_codes, p_owner, persons.schema, ordering)
    members = p_codes[perm].reshape(keep.size, size * len(persons.schema))
    codes = np.hstack([households.records.codes[keep], members])

    return ComposedTable(
        size,
        households.schema,
        persons.schema,
        RecordTable(schema, codes),
        households.ids[keep],
    )


def split_by_size(households: Households, persons: Persons, threshold: int) -> SizeSplit:
    """Partition households by exact size up to `threshold`; larger ones go to overflow."""
    if threshold < 1:
        raise ValueError(f"Size threshold must be >= 1, got {threshold}")
    owner = household_index(households, persons)
    sizes = np.bincount(owner, minlength=len(households))

    split = SizeSplit(empty_households=int((sizes == 0).sum()))
    if split.empty_households:
        logger.warning("%s household(s) have no members and are left out of every bucket", split.empty_households)

    def _part(mask_h: np.ndarray) -> tuple[Households, Persons]:
        rows = np.flatnonzero(mask_h)
        return households.take(rows), persons.take(np.flatnonzero(mask_h[owner]))

    for k in sorted(set(sizes[(sizes >= 1) & (sizes <= threshold)].tolist())):
        split.buckets[int(k)] = _part(sizes == k)
    split.overflow = _part(sizes > threshold)
    return split


def replicate_large(overflow: tuple[Households, Persons], target_counts: Mapping[int, int], *,
                    stratum: str, rng: np.random.Generator, id_prefix: str = "R",
                    pool_strata: bool = False) -> tuple[Households, Persons]:
    """
    Sample overflow households with replacement per stratum (category index of the
    `stratum` household attribute) until each target is met; member rows are copied
    intact under fresh household ids.

    A stratum with a positive target and no overflow household raises InfeasibleError,
    or with `pool_strata` draws from every stratum and takes over the stratum cell.
    """
    households, persons = overflow
    strata = households.records.column(stratum)
    attr = households.schema.get(stratum)

    picked: list[np.ndarray] = []
    relabel: list[np.ndarray] = []
    for code in sorted(int(c) for c in target_counts):
        target = int(target_counts[code])
        if target < 0:
            raise ValueError(f"Negative replication target {target} for {stratum}={code}")
        if target == 0:
            continue
        pool = np.flatnonzero(strata == code)
        if pool.size == 0:
            if not pool_strata or len(households) == 0:
                raise InfeasibleError(
                    f"No overflow household in stratum {stratum}={attr.categories[code]!r} "
                    f"to replicate {target} household(s)"
                )
            logger.warning("Pooling overflow households from every %s for %s=%r (%s household(s))",
                           stratum, stratum, attr.categories[code], target)
            pool = np.arange(len(households))
        picked.append(pool[rng.integers(0, pool.size, size=target)])
        relabel.append(np.full(target, code, dtype=np.int64))

    if not picked:
        return households.take([]), persons.take([])
    out_h, out_p = take_households(households, persons, np.concatenate(picked), id_prefix=id_prefix)

    codes = out_h.records.codes.copy()
    codes[:, out_h.schema.index(stratum)] = np.concatenate(relabel)
    return Households(out_h.ids, RecordTable(out_h.schema, codes)), out_p


def take_households(households: Households, persons: Persons, rows, *, id_prefix: str) -> tuple[Households, Persons]:
    """
    Copies of the given household rows (repeats allowed) with their members, under
    fresh ids id_prefix0000001, id_prefix0000002, ...
    """
    rows = np.asarray(rows, dtype=np.int64)
    owner = household_index(households, persons)
    order, starts = _member_blocks(owner, len(households))
    new_ids = np.asarray([f"{id_prefix}{i:07d}" for i in range(1, rows.size + 1)], dtype=object)

    counts = starts[rows + 1] - starts[rows]
    if counts.sum():
        member_rows = np.concatenate([order[starts[r]:starts[r + 1]] for r in rows])
    else:
        member_rows = np.zeros(0, dtype=np.int64)
    out_persons = Persons(np.repeat(new_ids, counts), persons.records.take(member_rows))
    return Households(new_ids, households.records.take(rows)), out_persons


def decompose(composed: ComposedTable, *, id_prefix: str = "H") -> tuple[Households, Persons]:
    """Split composed rows back into household rows and member rows (member order kept)."""
    n = len(composed)
    n_h = len(composed.household_schema)
    p = len(composed.person_schema)
    k = composed.size

    ids = composed.household_ids
    if ids is None:
        ids = np.asarray([f"{id_prefix}{i:07d}" for i in range(1, n + 1)], dtype=object)

    codes = composed.records.codes
    households = Households(ids, RecordTable(composed.household_schema, codes[:, :n_h]))
    member_codes = codes[:, n_h:].reshape(n * k, p)
    persons = Persons(np.repeat(np.asarray(ids, dtype=object), k), RecordTable(composed.person_schema, member_codes))
    return households, persons


def canonicalize_members(composed: ComposedTable, ordering: MemberOrdering | None = None) -> ComposedTable:
    """Re-sort each row's member blocks into canonical order (row order and ids kept)."""
    if len(composed) == 0:
        return composed
    households, persons = decompose(composed)
    out = compose_households(households, persons, composed.size, ordering)
    return out if composed.household_ids is not None else out.with_records(out.records, None)
