# bn_sample/sampling.py
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Iterable, Protocol, runtime_checkable

import numpy as np

from core.exceptions import PopSynthError
from dag_learn.dag import topological_order
from tabular.schema import LevelError
from tabular.tables import RecordTable

from .network import BayesNet

logger = logging.getLogger(__name__)

DEFAULT_CHUNK_ROWS = 100_000


class StructureError(PopSynthError):
    pass


@dataclass(frozen=True)
class ConditionalPopulation:
    """
    Rows over the conditional (root) attributes only, one per household to generate.

    `target`, when given, is the declared synthetic household count and must equal the
    number of rows.
    """

    records: RecordTable
    size: int | None = None
    target: int | None = None

    def __post_init__(self):
        if self.target is not None and self.target != len(self.records):
            raise ValueError(f"Conditional population has {len(self.records)} rows, target is {self.target}")

    def __len__(self) -> int:
        return len(self.records)

    @property
    def labels(self) -> tuple[str, ...]:
        return self.records.labels


@runtime_checkable
class GenerativeBackend(Protocol):
    """Anything that turns conditional rows into full composed rows."""

    def sample_conditional(self, conditional: ConditionalPopulation, seed: int) -> RecordTable:
        ...


def check_roots(net: BayesNet, conditional: Iterable[str]) -> None:
    """Conditional attributes may only have conditional parents."""
    conditional = set(conditional)
    unknown = sorted(conditional - set(net.nodes))
    if unknown:
        raise StructureError(f"Conditional attributes {unknown} are not nodes of the network")
    bad = sorted((u, v) for u, v in net.dag.edges if v in conditional and u not in conditional)
    if bad:
        raise StructureError(
            "Conditional attributes must be roots of the generated part; offending edges: "
            + ", ".join(f"{u} -> {v}" for u, v in bad)
        )


def _aligned_codes(net: BayesNet, records: RecordTable, label: str) -> np.ndarray:
    """Conditional codes re-expressed in the model's level order (matched by level name)."""
    theirs = records.schema.get(label).categories
    ours = net.schema.get(label).categories
    col = records.column(label)
    if theirs == ours:
        return col
    lookup = np.asarray([ours.index(c) if c in ours else -1 for c in theirs], dtype=np.int64)
    mapped = lookup[col] if col.size else col
    if (mapped < 0).any():
        bad = sorted({theirs[c] for c in col[mapped < 0]})
        raise LevelError(f"{label}: conditional rows use levels {bad} unknown to the model ({list(ours)})")
    return mapped


def row_uniforms(seed: int, start: int, n_rows: int, width: int) -> np.ndarray:
    """
    Uniform draws for rows start..start+n_rows-1, `width` per row.

    Row i always reads counter block i of a Philox stream keyed by `seed`, so any row
    range can be generated on its own and chunking never changes the result.
    """
    steps = max(1, math.ceil(width / 4))
    gen = np.random.Generator(np.random.Philox(counter=start * steps, key=int(seed)))
    return gen.random((n_rows, steps * 4))[:, :width]


def _draw(probs: np.ndarray, u: np.ndarray) -> np.ndarray:
    cum = np.cumsum(probs, axis=1)
    picked = (u[:, None] >= cum).sum(axis=1)
    return np.minimum(picked, probs.shape[1] - 1)


def _fill(net: BayesNet, codes: np.ndarray, free: list[str], seed: int, chunk_rows: int) -> None:
    """Draw the `free` columns of `codes` in place, in the given (topological) order."""
    col = {lb: i for i, lb in enumerate(net.schema.labels)}
    n = codes.shape[0]
    chunk_rows = max(1, int(chunk_rows))
    for start in range(0, n, chunk_rows):
        stop = min(n, start + chunk_rows)
        u = row_uniforms(seed, start, stop - start, len(free))
        block = codes[start:stop]
        for j, v in enumerate(free):
            cpt = net.cpts[v]
            parent_codes = block[:, [col[p] for p in cpt.parents]]
            block[:, col[v]] = _draw(cpt.probabilities(parent_codes), u[:, j])


def sample_conditional(net: BayesNet, conditional: ConditionalPopulation, seed: int, *,
                       chunk_rows: int = DEFAULT_CHUNK_ROWS) -> RecordTable:
    """
    Ancestral sampling with the conditional attributes clamped.

    Conditional cells are copied verbatim; every other node is drawn in topological
    order from its CPT given the already realised parents. Output columns follow the
    network schema.
    """
    records = conditional.records
    check_roots(net, records.labels)

    order = topological_order(net.dag)
    clamped = set(records.labels)
    free = [v for v in order if v not in clamped]
    col = {lb: i for i, lb in enumerate(net.schema.labels)}

    n = len(records)
    codes = np.zeros((n, len(net.schema)), dtype=np.int64)
    for lb in records.labels:
        codes[:, col[lb]] = _aligned_codes(net, records, lb)

    _fill(net, codes, free, seed, chunk_rows)
    logger.debug("Sampled %s row(s) over %s free node(s)", n, len(free))
    return RecordTable(net.schema, codes)


def sample_joint(net: BayesNet, n: int, seed: int, *, chunk_rows: int = DEFAULT_CHUNK_ROWS) -> RecordTable:
    """`n` rows drawn from the full joint distribution of `net`, no attribute clamped."""
    if n < 0:
        raise ValueError(f"Row count must be >= 0, got {n}")
    codes = np.zeros((int(n), len(net.schema)), dtype=np.int64)
    _fill(net, codes, topological_order(net.dag), seed, chunk_rows)
    logger.debug("Sampled %s joint row(s)", n)
    return RecordTable(net.schema, codes)


class BayesNetBackend:
    """GenerativeBackend over a fitted BayesNet."""

    def __init__(self, net: BayesNet, *, chunk_rows: int = DEFAULT_CHUNK_ROWS):
        self.net = net
        self.chunk_rows = chunk_rows

    def sample_conditional(self, conditional: ConditionalPopulation, seed: int) -> RecordTable:
        return sample_conditional(self.net, conditional, seed, chunk_rows=self.chunk_rows)
