# ipf/services.py
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from bn_sample.sampling import ConditionalPopulation
from composition.households import ComposedTable
from tabular.schema import HOUSEHOLD, SchemaError
from tabular.services import project_counts
from tabular.tables import ContingencyTable, RecordTable

from .constraints import InfeasibleTargetError, MarginalConstraint, WeightedSample

logger = logging.getLogger(__name__)

DEFAULT_TOL = 1e-8
DEFAULT_MAX_ITER = 1000


@dataclass(frozen=True)
class IpfResult:
    table: ContingencyTable
    sweeps: int
    max_deviation: float
    converged: bool
    history: tuple[float, ...] = field(default=(), compare=False)


@dataclass(frozen=True)
class RakeResult:
    sample: WeightedSample
    sweeps: int
    max_deviation: float
    converged: bool
    history: tuple[float, ...] = field(default=(), compare=False)

    @property
    def weights(self) -> np.ndarray:
        return self.sample.weights


# --------------------
# Category slots
# --------------------

@dataclass
class _Margin:
    """One constraint resolved against the units it counts."""

    constraint: MarginalConstraint
    slot: np.ndarray      # category slot of every counted unit
    unit: np.ndarray      # household (or cell) each counted unit belongs to
    targets: np.ndarray   # target per slot, 0 where the constraint lists none
    keys: np.ndarray      # category codes per slot
    checked: np.ndarray   # slots that take part in the convergence check


def _margin(constraint: MarginalConstraint, codes: np.ndarray, unit: np.ndarray) -> _Margin:
    keys, values = constraint.arrays()
    n = codes.shape[0]
    both = np.concatenate([np.asarray(codes, dtype=np.int64).reshape(n, len(constraint.axes)), keys])
    uniq, inverse = np.unique(both, axis=0, return_inverse=True)
    inverse = inverse.reshape(-1)
    targets = np.zeros(len(uniq))
    targets[inverse[n:]] = values
    return _Margin(constraint, inverse[:n], unit, targets, uniq, np.ones(len(uniq), dtype=bool))


def _check_support(margins: list[_Margin], current: list[np.ndarray], *, skip_infeasible: bool,
                   describe) -> None:
    for m, cur in zip(margins, current):
        bad = np.flatnonzero((m.targets > 0) & (cur <= 0))
        if not bad.size:
            continue
        names = [describe(m.constraint, m.keys[i]) for i in bad[:5]]
        if not skip_infeasible:
            raise InfeasibleTargetError(
                f"Constraint {m.constraint.name}: positive target with no supporting rows for {names}"
            )
        logger.warning(
            "Constraint %s: skipping %s infeasible categor%s, e.g. %s",
            m.constraint.name, bad.size, "y" if bad.size == 1 else "ies", names,
        )
        m.checked[bad] = False


def _deviation(m: _Margin, cur: np.ndarray) -> float:
    t = m.targets[m.checked]
    c = cur[m.checked]
    if not t.size:
        return 0.0
    dev = np.where(t > 0, np.abs(c - t) / np.where(t > 0, t, 1.0), np.where(c > 0, np.inf, 0.0))
    return float(dev.max())


def _factors(m: _Margin, cur: np.ndarray) -> np.ndarray:
    return np.divide(m.targets, cur, out=np.ones_like(cur), where=cur > 0)


def _describe_codes(constraint: MarginalConstraint, key) -> str:
    return ", ".join(f"{a}={int(c)}" for a, c in zip(constraint.axes, key))


# --------------------
# IPF on contingency tables
# --------------------

def ipf_fit(seed: ContingencyTable, constraints: Sequence[MarginalConstraint], tol: float = DEFAULT_TOL,
            max_iter: int = DEFAULT_MAX_ITER, *, skip_infeasible: bool = False) -> IpfResult:
    """
    Classic iterative proportional fitting of a sparse seed table.

    Each sweep scales the cells to every constraint in turn. Cells absent from (or zero
    in) the seed stay zero. Stops once the largest relative marginal deviation is below
    `tol`, or after `max_iter` sweeps with a warning.
    """
    keys, values = seed.arrays()
    margins = []
    for c in constraints:
        missing = [a for a in c.axes if a not in seed.axes]
        if missing:
            raise SchemaError(f"Constraint {c.name} uses axes {missing} not in the seed {seed.axes}")
        pos = [seed.axes.index(a) for a in c.axes]
        margins.append(_margin(c, keys[:, pos], np.arange(len(values))))

    def current(v):
        return [np.bincount(m.slot, weights=v, minlength=len(m.targets)) for m in margins]

    _check_support(margins, current(values), skip_infeasible=skip_infeasible, describe=_describe_codes)

    def deviation(v):
        return max((_deviation(m, cur) for m, cur in zip(margins, current(v))), default=0.0)

    v = values.copy()
    dev = deviation(v)
    history = [dev]
    sweeps = 0
    while dev >= tol and sweeps < max_iter:
        for m in margins:
            cur = np.bincount(m.slot, weights=v, minlength=len(m.targets))
            v = v * _factors(m, cur)[m.slot]
        sweeps += 1
        dev = deviation(v)
        history.append(dev)

    converged = dev < tol
    if not converged:
        logger.warning("IPF did not converge after %s sweep(s); max relative deviation %.3g", sweeps, dev)
    else:
        logger.debug("IPF converged after %s sweep(s)", sweeps)
    return IpfResult(ContingencyTable.from_arrays(seed.axes, keys, v), sweeps, dev, converged, tuple(history))


# --------------------
# Household weight raking
# --------------------

def rake_household_weights(sample: WeightedSample, constraints: Sequence[MarginalConstraint],
                           tol: float = DEFAULT_TOL, max_iter: int = DEFAULT_MAX_ITER, *,
                           skip_infeasible: bool = False) -> RakeResult:
    """
    Scale household weights towards every constraint in turn.

    A household-level constraint scales each household by its category's
    target/current ratio. A person-level constraint scales each household by the
    geometric mean of its members' category ratios, so person targets are only
    approached, not forced.
    """
    margins = [_margin(c, *sample.categories(c)) for c in constraints]
    n = len(sample)
    member_counts = [np.bincount(m.unit, minlength=n) for m in margins]

    def current(w):
        return [np.bincount(m.slot, weights=w[m.unit], minlength=len(m.targets)) for m in margins]

    def describe(c, key):
        return c.describe(key, sample.schema_for(c))

    _check_support(margins, current(sample.weights), skip_infeasible=skip_infeasible, describe=describe)

    def deviation(w):
        return max((_deviation(m, cur) for m, cur in zip(margins, current(w))), default=0.0)

    w = sample.weights.copy()
    dev = deviation(w)
    history = [dev]
    sweeps = 0
    while dev >= tol and sweeps < max_iter:
        for m, counts in zip(margins, member_counts):
            cur = np.bincount(m.slot, weights=w[m.unit], minlength=len(m.targets))
            f = _factors(m, cur)
            if m.constraint.level == HOUSEHOLD:
                w = w * f[m.slot]
                continue
            with np.errstate(divide="ignore"):
                logs = np.bincount(m.unit, weights=np.log(f[m.slot]), minlength=n)
            mean_log = np.divide(logs, counts, out=np.zeros(n), where=counts > 0)
            w = w * np.exp(mean_log)
        sweeps += 1
        prev, dev = dev, deviation(w)
        history.append(dev)
        if dev >= tol and abs(prev - dev) < 1e-12:
            logger.warning("Raking stalled after %s sweep(s) at max relative deviation %.3g", sweeps, dev)
            break

    converged = dev < tol
    if not converged and sweeps >= max_iter:
        logger.warning("Raking did not converge after %s sweep(s); max relative deviation %.3g", sweeps, dev)
    logger.info("Raked %s household weight(s) against %s constraint(s) in %s sweep(s)", n, len(margins), sweeps)
    return RakeResult(sample.with_weights(w), sweeps, dev, converged, tuple(history))


# --------------------
# Integerization
# --------------------

def integerize(weights, target_total: int, *, rng: np.random.Generator | None = None) -> np.ndarray:
    """
    Whole replication counts summing to `target_total`, proportional to `weights`.

    Largest remainder with ties to the lower row index; with `rng`, the leftover units
    are drawn without replacement in proportion to the fractional remainders.
    """
    w = np.asarray(weights, dtype=float)
    target_total = int(target_total)
    if target_total < 0:
        raise ValueError(f"target_total must be >= 0, got {target_total}")
    if target_total == 0:
        return np.zeros(w.shape[0], dtype=np.int64)
    if (w < 0).any() or not np.isfinite(w).all():
        raise ValueError("Weights must be finite and non-negative")
    s = math.fsum(w)
    if not s > 0:
        raise ValueError("Cannot apportion a positive total over zero weight")

    quotas = w / s * target_total
    counts = np.floor(quotas).astype(np.int64)
    rest = target_total - int(counts.sum())
    if rest <= 0:
        return counts

    frac = quotas - counts
    if rng is not None and np.count_nonzero(frac) >= rest:
        picks = rng.choice(w.shape[0], size=rest, replace=False, p=frac / frac.sum())
    else:
        picks = np.lexsort((np.arange(w.shape[0]), -frac))[:rest]
    counts[picks] += 1
    return counts


# --------------------
# Conditional population
# --------------------

def household_targets(constraint: MarginalConstraint, *, stratum: str, size_label: str) -> dict[int, dict[int, int]]:
    """
    Household counts per size and stratum from an (area x size) household marginal:
    {k: {area code: households}}, with the overflow level under k = threshold + 1.
    Other axes of the constraint are summed out.
    """
    if constraint.level != HOUSEHOLD:
        raise SchemaError(f"Household targets need a household-level constraint, {constraint.name} counts persons")
    for label in (stratum, size_label):
        if label not in constraint.axes:
            raise SchemaError(f"Constraint {constraint.name} has no {label!r} axis")
    counts = project_counts(ContingencyTable(constraint.axes, constraint.targets), (size_label, stratum))
    counts.assert_integral()

    out: dict[int, dict[int, int]] = {}
    for (z, area), value in sorted(counts.cells.items()):
        out.setdefault(z + 1, {})[area] = int(round(value))
    return out


def conditional_labels(composed: ComposedTable, conditional: Sequence[str]) -> list[str]:
    """Household labels as given; a base person label expands to its member slots _1.._k."""
    out = []
    for label in conditional:
        if label in composed.household_schema:
            out.append(label)
        elif label in composed.person_schema:
            out.extend(composed.member_labels([label]))
        elif label in composed.schema:
            out.append(label)
        else:
            raise SchemaError(f"Conditional attribute {label!r} is not in the composed schema for size {composed.size}")
    return list(dict.fromkeys(out))


def build_conditional_population(composed: ComposedTable, constraints: Sequence[MarginalConstraint],
                                 target: int | Mapping[int, int], conditional: Sequence[str], *,
                                 stratum: str | None = None, weights=None, tol: float = DEFAULT_TOL,
                                 max_iter: int = DEFAULT_MAX_ITER, skip_infeasible: bool = False,
                                 pool_strata: bool = False,
                                 rng: np.random.Generator | None = None) -> ConditionalPopulation:
    """
    Conditional rows for one household size.

    Weights come from raking `composed` against `constraints` unless precomputed
    `weights` are passed. They are integerized to `target` (a total, or households per
    `stratum` code), rows are replicated by count and projected to the conditional labels.
    """
    labels = conditional_labels(composed, conditional)
    if weights is None:
        sample = WeightedSample.from_composed(composed)
        if constraints:
            sample = rake_household_weights(sample, constraints, tol, max_iter, skip_infeasible=skip_infeasible).sample
        weights = sample.weights
    weights = np.asarray(weights, dtype=float)
    if weights.shape != (len(composed),):
        raise ValueError(f"{weights.shape[0]} weights for {len(composed)} composed rows")

    records = composed.records
    if isinstance(target, Mapping):
        if stratum is None:
            raise ValueError("Per-stratum targets need the stratum label")
        blocks = _stratified(records, weights, target, stratum, pool_strata=pool_strata, rng=rng, size=composed.size)
        total = sum(int(v) for v in target.values())
    else:
        total = int(target)
        if total > 0 and not weights.sum() > 0:
            raise InfeasibleTargetError(f"No weighted household of size {composed.size} to draw {total} from")
        blocks = [records.take(np.repeat(np.arange(len(records)), integerize(weights, total, rng=rng)))]

    out = RecordTable.concat(blocks).select(labels) if blocks else RecordTable.empty(records.schema.subset(labels))
    logger.info("Conditional population for size %s: %s household(s)", composed.size, len(out))
    return ConditionalPopulation(out, size=composed.size, target=total)


def _stratified(records: RecordTable, weights: np.ndarray, targets: Mapping[int, int], stratum: str, *,
                pool_strata: bool, rng: np.random.Generator | None, size: int) -> list[RecordTable]:
    col = records.column(stratum)
    attr = records.schema.get(stratum)
    j = records.schema.index(stratum)
    blocks = []
    for code in sorted(int(c) for c in targets):
        n = int(targets[code])
        if n < 0:
            raise ValueError(f"Negative household target {n} for {stratum}={code}")
        if n == 0:
            continue
        rows = np.flatnonzero(col == code)
        if rows.size and weights[rows].sum() > 0:
            counts = integerize(weights[rows], n, rng=rng)
            blocks.append(records.take(np.repeat(rows, counts)))
            continue

        name = attr.categories[code]
        if not pool_strata:
            raise InfeasibleTargetError(
                f"No sampled household of size {size} in {stratum}={name!r} for a target of {n}"
            )
        pool = weights if weights.sum() > 0 else np.ones_like(weights)
        if not pool.size:
            raise InfeasibleTargetError(f"No sampled household of size {size} at all to pool for {stratum}={name!r}")
        logger.warning("Pooling size-%s households from every %s for %s=%r (%s household(s))", size, stratum, stratum, name, n)
        codes = records.codes[np.repeat(np.arange(len(records)), integerize(pool, n, rng=rng))].copy()
        codes[:, j] = code
        blocks.append(RecordTable(records.schema, codes))
    return blocks
