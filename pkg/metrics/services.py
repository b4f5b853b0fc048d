# metrics/services.py
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import pandas as pd
from scipy import special, stats

from composition.households import ComposedTable, Households, Persons, household_index, size_attribute, size_codes
from composition.services import canonicalize_members
from core.exceptions import PopSynthError
from ipf.constraints import MarginalConstraint
from tabular.schema import HOUSEHOLD, PERSON, Schema, SchemaError
from tabular.services import distribution
from tabular.tables import DistributionVector, RecordTable

from .report import ComparisonEntry, DiversityEntry, SamplingZeroEntry

logger = logging.getLogger(__name__)


class UndefinedMetricError(PopSynthError):
    pass


class DivergenceError(PopSynthError):
    pass


# --------------------
# Distribution metrics
# --------------------

def _aligned(hat: DistributionVector, ref: DistributionVector) -> tuple[np.ndarray, np.ndarray]:
    keys, a, b = hat.aligned(ref)
    if not keys:
        raise ValueError(f"No cells to compare over {hat.axes}")
    return a, b


def srmse(hat: DistributionVector, ref: DistributionVector) -> float:
    """Root mean squared cell error over the union of cells, divided by the mean reference cell."""
    a, b = _aligned(hat, ref)
    mean = b.mean()
    if mean <= 0:
        raise UndefinedMetricError(f"Reference over {ref.axes} has zero mean")
    return float(math.sqrt(np.mean((a - b) ** 2)) / mean)


def kl(hat: DistributionVector, ref: DistributionVector) -> float:
    a, b = _aligned(hat, ref)
    outside = (a > 0) & (b == 0)
    if outside.any():
        raise DivergenceError(f"{int(outside.sum())} cell(s) over {hat.axes} carry mass absent from the reference")
    return float(math.fsum(special.rel_entr(a, b)))


def jsd(hat: DistributionVector, ref: DistributionVector) -> float:
    """Jensen-Shannon distance (square root of the divergence), natural log."""
    a, b = _aligned(hat, ref)
    m = 0.5 * (a + b)
    js = 0.5 * (math.fsum(special.rel_entr(a, m)) + math.fsum(special.rel_entr(b, m)))
    return math.sqrt(max(js, 0.0))


def r_squared(hat: DistributionVector, ref: DistributionVector) -> float:
    """Coefficient of determination of hat against ref under the identity line."""
    a, b = _aligned(hat, ref)
    if a.size < 2:
        raise ValueError(f"r_squared needs at least 2 cells, got {a.size}")
    total = math.fsum((b - b.mean()) ** 2)
    if total <= 0:
        raise UndefinedMetricError(f"Reference over {ref.axes} has zero variance")
    return 1.0 - math.fsum((a - b) ** 2) / total


def compare(name: str, hat: DistributionVector, ref: DistributionVector, *, population: str = "synthetic",
            reference: str = "census") -> ComparisonEntry:
    try:
        r2 = r_squared(hat, ref)
    except (UndefinedMetricError, ValueError) as e:
        logger.debug("r_squared undefined for %s: %s", name, e)
        r2 = None
    keys, _, _ = hat.aligned(ref)
    return ComparisonEntry(name, hat.axes, srmse(hat, ref), jsd(hat, ref), r2, len(keys), population, reference)


# --------------------
# Diversity
# --------------------

def entropy_diversity(records: RecordTable, attributes: Sequence[str]) -> float:
    """Shannon entropy (natural log) of the joint-value group shares of `attributes`."""
    return diversity(records, attributes).entropy


def diversity(records: RecordTable, attributes: Sequence[str], *, level: str = PERSON,
              population: str = "synthetic") -> DiversityEntry:
    if not attributes:
        raise ValueError("Diversity needs at least one attribute")
    dist = distribution(records, attributes)
    entropy = float(stats.entropy(np.fromiter(dist.cells.values(), dtype=float)))
    return DiversityEntry(tuple(attributes), entropy, dist.group_count, level, population)


# --------------------
# Populations (households + members)
# --------------------

@dataclass(frozen=True)
class Population:
    households: Households
    persons: Persons

    @property
    def owner(self) -> np.ndarray:
        return household_index(self.households, self.persons)

    def person_records(self, labels: Sequence[str] | None = None) -> RecordTable:
        """Person rows with their household's attributes joined on."""
        h, p = self.households.records, self.persons.records
        joined = RecordTable(
            Schema(h.schema.attributes + p.schema.attributes),
            np.hstack([h.codes[self.owner], p.codes]),
        )
        return joined.select(labels) if labels is not None else joined

    def household_records(self, *, size_label: str | None = None, threshold: int | None = None) -> RecordTable:
        records = self.households.records
        if not size_label:
            return records
        sizes = np.bincount(self.owner, minlength=len(self.households))
        return RecordTable(
            Schema(records.schema.attributes + (size_attribute(size_label, threshold),)),
            np.column_stack([records.codes, size_codes(np.maximum(sizes, 1), threshold)]),
        )

    def signatures(self, attributes: Sequence[str]) -> pd.Series:
        """
        One hashable key per household: its household attributes among `attributes`,
        then the sorted tuple of its members' person attributes.
        """
        h_labels = [a for a in attributes if a in self.households.schema]
        p_labels = [a for a in attributes if a in self.persons.schema]
        unknown = sorted(set(attributes) - set(h_labels) - set(p_labels))
        if unknown:
            raise SchemaError(f"Unknown diversity attributes {unknown}")

        owner = self.owner
        h_codes = self.households.records.select(h_labels).codes
        p_codes = self.persons.records.select(p_labels).codes
        members: list[list[tuple]] = [[] for _ in range(len(self.households))]
        if p_labels:
            order = np.lexsort([p_codes[:, j] for j in reversed(range(len(p_labels)))] + [owner])
            for i in order:
                members[owner[i]].append(tuple(p_codes[i].tolist()))
        return pd.Series([
            (tuple(h_codes[h].tolist()), tuple(members[h])) for h in range(len(self.households))
        ], dtype=object)


def household_diversity(population: Population, attributes: Sequence[str], *,
                        label: str = "synthetic") -> DiversityEntry:
    """Entropy over household signatures (household attributes plus the member multiset)."""
    if not attributes:
        raise ValueError("Diversity needs at least one attribute")
    if not len(population.households):
        raise ValueError("Diversity of an empty population is undefined")
    shares = population.signatures(attributes).value_counts(normalize=True, sort=False)
    return DiversityEntry(tuple(attributes), float(stats.entropy(shares.to_numpy(dtype=float))), int(shares.size),
                          HOUSEHOLD, label)


def population_diversity(population: Population, attributes: Sequence[str], *, level: str = HOUSEHOLD,
                         label: str = "synthetic") -> DiversityEntry:
    if level == HOUSEHOLD:
        return household_diversity(population, attributes, label=label)
    return diversity(population.person_records(), attributes, level=PERSON, population=label)


def _keys(population: Population, attributes: Sequence[str], level: str) -> set:
    if level == HOUSEHOLD:
        return set(population.signatures(attributes))
    codes = population.person_records(attributes).codes
    return set(map(tuple, codes.tolist()))


def sampling_zero_recovery(truth: Population, sample: Population, synthetic: Population,
                           attributes: Sequence[str], *, level: str = HOUSEHOLD,
                           label: str = "synthetic") -> SamplingZeroEntry:
    """Combinations in the truth that the sample misses, and how many the synthetic output has."""
    truth_only = _keys(truth, attributes, level) - _keys(sample, attributes, level)
    recovered = truth_only & _keys(synthetic, attributes, level)
    return SamplingZeroEntry(tuple(attributes), level, len(truth_only), len(recovered), label)


# --------------------
# Reports
# --------------------

def association_check(synthetic: ComposedTable, reference: ComposedTable, attributes: Sequence[str], *,
                      population: str = "synthetic", reference_name: str = "truth") -> ComparisonEntry:
    """Joint distribution of the member-slot attributes (e.g. AGEP_1 x AGEP_2) on both tables."""
    if synthetic.size != reference.size:
        raise ValueError(f"Cannot compare size-{synthetic.size} households with size-{reference.size} households")
    axes = synthetic.member_labels(attributes)
    hat = distribution(canonicalize_members(synthetic).records, axes)
    ref = distribution(canonicalize_members(reference).records, axes)
    return compare(f"members_{synthetic.size}_{'x'.join(attributes)}", hat, ref,
                   population=population, reference=reference_name)


@dataclass(frozen=True)
class Grouping:
    axes: tuple[str, ...]
    level: str

    @property
    def name(self) -> str:
        return "x".join(self.axes)


def resolve_grouping(axes: Sequence[str], schema: Schema) -> Grouping:
    """Person level as soon as any axis is a person attribute."""
    axes = tuple(axes)
    if not axes:
        raise SchemaError("A grouping needs at least one attribute")
    attrs = [schema.get(a) for a in axes]
    return Grouping(axes, PERSON if any(a.level == PERSON for a in attrs) else HOUSEHOLD)


def grouping_distribution(population: Population, grouping: Grouping, *, size_label: str | None = None,
                          threshold: int | None = None) -> DistributionVector:
    if grouping.level == PERSON:
        return distribution(population.person_records(), grouping.axes)
    return distribution(population.household_records(size_label=size_label, threshold=threshold), grouping.axes)


def census_distribution(constraints: Sequence[MarginalConstraint], grouping: Grouping) -> DistributionVector | None:
    """Shares from the first constraint at the grouping's level whose axes cover it."""
    for c in constraints:
        if c.level != grouping.level or not set(grouping.axes) <= set(c.axes):
            continue
        pos = [c.axes.index(a) for a in grouping.axes]
        acc: dict[tuple[int, ...], float] = {}
        for key, v in c.targets.items():
            k = tuple(key[p] for p in pos)
            acc[k] = acc.get(k, 0.0) + v
        total = math.fsum(acc.values())
        return DistributionVector(grouping.axes, {k: v / total for k, v in acc.items() if v > 0})
    return None


def _category(axes, schema: Schema, key) -> str:
    return "|".join(f"{a}={schema.get(a).categories[c]}" for a, c in zip(axes, key))


def marginal_report(synthetic: Population, census: Sequence[MarginalConstraint] | Population,
                    groupings: Sequence[Sequence[str]], schema: Schema, *, size_label: str | None = None,
                    threshold: int | None = None) -> dict[str, pd.DataFrame]:
    """
    Paired (synthetic share, census share) rows per grouping. `census` is either the
    marginal constraints or a reference population tabulated the same way.
    """
    frames = {}
    for axes in groupings:
        grouping = resolve_grouping(axes, schema)
        hat = grouping_distribution(synthetic, grouping, size_label=size_label, threshold=threshold)
        if isinstance(census, Population):
            ref = grouping_distribution(census, grouping, size_label=size_label, threshold=threshold)
        else:
            ref = census_distribution(census, grouping)
            if ref is None:
                logger.warning("No census table covers grouping %s; skipped", grouping.name)
                continue
        keys, a, b = hat.aligned(ref)
        frames[grouping.name] = pd.DataFrame({
            "grouping": grouping.name,
            "category": [_category(grouping.axes, schema, k) for k in keys],
            "synthetic_share": a,
            "census_share": b,
        }, columns=["grouping", "category", "synthetic_share", "census_share"])
    return frames


def write_marginal_report(directory, frames: dict[str, pd.DataFrame]) -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    out = []
    for name, frame in sorted(frames.items()):
        path = directory / f"{name}.csv"
        frame.to_csv(path, index=False, lineterminator="\n", float_format="%.10g")
        out.append(path)
    return out


def grouping_comparisons(synthetic: Population, reference: Sequence[MarginalConstraint] | Population,
                         groupings: Sequence[Sequence[str]], schema: Schema, *, population: str = "synthetic",
                         size_label: str | None = None, threshold: int | None = None) -> list[ComparisonEntry]:
    reference_name = "truth" if isinstance(reference, Population) else "census"
    out = []
    for axes in groupings:
        grouping = resolve_grouping(axes, schema)
        hat = grouping_distribution(synthetic, grouping, size_label=size_label, threshold=threshold)
        if isinstance(reference, Population):
            ref = grouping_distribution(reference, grouping, size_label=size_label, threshold=threshold)
        else:
            ref = census_distribution(reference, grouping)
            if ref is None:
                continue
        out.append(compare(grouping.name, hat, ref, population=population, reference=reference_name))
    return out
