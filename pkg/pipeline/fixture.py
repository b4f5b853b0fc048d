# pipeline/fixture.py
"""
Desk-scale ground truth: one known Bayesian network per household size, the
population sampled from them, a biased household sample drawn from that population
and census marginals tabulated exactly from it.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from bn_sample.network import BayesNet, Cpt
from bn_sample.sampling import sample_joint
from composition.households import ComposedTable, Households, Persons, composed_schema, size_attribute
from composition.services import decompose
from core.exceptions import PopSynthError
from core.seeds import stage_rng
from dag_learn.dag import Dag
from ipf.constraints import MarginalConstraint, write_marginal
from metrics.services import Population
from tabular.io import encode_frame
from tabular.schema import HOUSEHOLD, PERSON, AttributeSpec, Schema
from tabular.services import tabulate

logger = logging.getLogger(__name__)

AGE_EDGES = (0, 18, 35, 50, 65, 100)
INCOME_LEVELS = ("low", "mid", "high")
VEHICLE_LEVELS = ("0", "1", "2+")
SEX_LEVELS = ("1", "2")
RACE_LEVELS = ("0", "1")

# (marginal file stem, axes)
CENSUS_TABLES = (
    ("household_area_size", ("AREA", "NP")),
    ("household_area_vehicle", ("AREA", "VEH")),
    ("person_area_age", ("AREA", "AGEP")),
    ("person_area_race", ("AREA", "RACWHT")),
)


class FixtureError(PopSynthError):
    pass


@dataclass(frozen=True)
class FixtureSpec:
    """
    The ground-truth networks and the sampling design.

    Household chain: AREA -> NP, AREA -> HINCP -> VEH. Members: the head's age band,
    sex and race (race depends on AREA); member 2 is a spouse or a child, later members
    are mostly children; everyone shares the head's race with probability `same_race`.
    truth_network turns these shares into the CPTs for one household size.
    """

    population_size: int = 50_000
    sample_fraction: float = 0.05
    bias: tuple[float, ...] = (1.6, 1.0, 0.7, 0.5)
    threshold: int = 5

    area_weights: tuple[float, ...] = (0.4, 0.3, 0.2, 0.1)
    size_given_area: tuple[tuple[float, ...], ...] = (
        (0.32, 0.33, 0.15, 0.12, 0.05, 0.02, 0.01),
        (0.28, 0.32, 0.16, 0.13, 0.06, 0.03, 0.02),
        (0.22, 0.28, 0.18, 0.16, 0.09, 0.04, 0.03),
        (0.18, 0.25, 0.18, 0.18, 0.11, 0.06, 0.04),
    )
    income_given_area: tuple[tuple[float, ...], ...] = (
        (0.20, 0.40, 0.40),
        (0.30, 0.45, 0.25),
        (0.40, 0.40, 0.20),
        (0.55, 0.35, 0.10),
    )
    vehicles_given_income: tuple[tuple[float, ...], ...] = (
        (0.45, 0.40, 0.15),
        (0.15, 0.50, 0.35),
        (0.05, 0.35, 0.60),
    )
    white_given_area: tuple[float, ...] = (0.8, 0.6, 0.4, 0.2)
    head_age: tuple[float, ...] = (0.0, 0.25, 0.30, 0.25, 0.20)
    adult_age: tuple[float, ...] = (0.0, 0.40, 0.25, 0.20, 0.15)

    spouse_rate: float = 0.75
    spouse_same_band: float = 0.7
    opposite_sex_spouse: float = 0.9
    child_rate: float = 0.8
    same_race: float = 0.9

    def __post_init__(self):
        if self.population_size < 1:
            raise FixtureError(f"population_size must be >= 1, got {self.population_size}")
        if not 0 < self.sample_fraction <= 1:
            raise FixtureError(f"sample_fraction must lie in (0, 1], got {self.sample_fraction}")
        if any(m <= 0 for m in self.bias):
            raise FixtureError(f"Bias multipliers must be > 0, got {self.bias}")
        if self.threshold < 1:
            raise FixtureError(f"threshold must be >= 1, got {self.threshold}")

        n_areas = len(self.area_weights)
        for name in ("bias", "size_given_area", "income_given_area", "white_given_area"):
            if len(getattr(self, name)) != n_areas:
                raise FixtureError(f"{name} needs one entry per area ({n_areas})")
        if len(self.vehicles_given_income) != len(INCOME_LEVELS):
            raise FixtureError("vehicles_given_income needs one row per income level")
        if len(self.head_age) != len(AGE_EDGES) - 1 or len(self.adult_age) != len(AGE_EDGES) - 1:
            raise FixtureError("Age distributions need one share per age band")
        if len({len(row) for row in self.size_given_area}) != 1:
            raise FixtureError("Every area needs the same number of household sizes")

        for row in (self.area_weights, self.head_age, self.adult_age,
                    *self.size_given_area, *self.income_given_area, *self.vehicles_given_income):
            if any(p < 0 for p in row) or abs(sum(row) - 1.0) > 1e-9:
                raise FixtureError(f"Distribution {row} must be non-negative and sum to 1")

    @property
    def areas(self) -> tuple[str, ...]:
        return tuple(str(i) for i in range(1, len(self.area_weights) + 1))

    @property
    def max_size(self) -> int:
        return len(self.size_given_area[0])

    def schema(self) -> Schema:
        return Schema((
            AttributeSpec("AREA", level=HOUSEHOLD, levels=self.areas, is_conditional=True),
            AttributeSpec("HINCP", level=HOUSEHOLD, levels=INCOME_LEVELS),
            AttributeSpec("VEH", level=HOUSEHOLD, levels=VEHICLE_LEVELS),
            AttributeSpec("AGEP", level=PERSON, bin_edges=AGE_EDGES, is_conditional=True),
            AttributeSpec("SEX", level=PERSON, levels=SEX_LEVELS),
            AttributeSpec("RACWHT", level=PERSON, levels=RACE_LEVELS, is_conditional=True),
        ))


@dataclass
class FixtureFiles:
    root: Path
    truth_households: Path
    truth_persons: Path
    sample_households: Path
    sample_persons: Path
    marginals: list[Path] = field(default_factory=list)
    networks: dict[int, Path] = field(default_factory=dict)
    config: Path | None = None


# --------------------
# Ground-truth networks
# --------------------

def _size_shares(spec: FixtureSpec) -> np.ndarray:
    """P(size = k), k = 1..max_size."""
    return np.asarray(spec.area_weights) @ np.asarray(spec.size_given_area)


def _indicator(n: int, i: int) -> np.ndarray:
    return np.eye(n)[i]


def truth_network(spec: FixtureSpec, size: int) -> BayesNet:
    """
    The ground-truth network for households of `size` members, over the composed schema.

    AREA is weighted by how often the area holds households of this size. Member 2 is a
    spouse (same age band as the head with probability `spouse_same_band`) or a child;
    later members are children with probability `child_rate`. Every member's race copies
    the head's with probability `same_race`.
    """
    if not 1 <= size <= spec.max_size:
        raise FixtureError(f"Household size must lie in 1..{spec.max_size}, got {size}")
    shares = np.asarray(spec.area_weights) * np.asarray(spec.size_given_area)[:, size - 1]
    if shares.sum() <= 0:
        raise FixtureError(f"Households of size {size} never occur in the fixture")

    schema = spec.schema()
    composed = composed_schema(schema.by_level(HOUSEHOLD), schema.by_level(PERSON), size)
    bands = len(AGE_EDGES) - 1
    adult = np.asarray(spec.adult_age)
    child = _indicator(bands, 0)
    even = np.full(len(SEX_LEVELS), 1 / len(SEX_LEVELS))

    tables: dict[str, tuple[tuple[str, ...], dict]] = {
        "AREA": ((), {(): shares / shares.sum()}),
        "HINCP": (("AREA",), {(a,): row for a, row in enumerate(spec.income_given_area)}),
        "VEH": (("HINCP",), {(i,): row for i, row in enumerate(spec.vehicles_given_income)}),
        "AGEP_1": ((), {(): spec.head_age}),
        "SEX_1": ((), {(): even}),
        "RACWHT_1": (("AREA",), {(a,): (1 - w, w) for a, w in enumerate(spec.white_given_area)}),
    }
    same_race = {(r,): np.where(np.arange(2) == r, spec.same_race, 1 - spec.same_race) for r in range(2)}
    for i in range(2, size + 1):
        if i == 2:
            s, same = spec.spouse_rate, spec.spouse_same_band
            tables["AGEP_2"] = (("AGEP_1",), {
                (h,): (1 - s) * child + s * (same * _indicator(bands, h) + (1 - same) * adult)
                for h in range(bands)
            })
            flip = s * spec.opposite_sex_spouse + (1 - s * spec.opposite_sex_spouse) / 2
            tables["SEX_2"] = (("SEX_1",), {(x,): np.where(np.arange(2) == x, 1 - flip, flip) for x in range(2)})
        else:
            tables[f"AGEP_{i}"] = ((), {(): spec.child_rate * child + (1 - spec.child_rate) * adult})
            tables[f"SEX_{i}"] = ((), {(): even})
        tables[f"RACWHT_{i}"] = (("RACWHT_1",), same_race)

    dag = Dag(composed.labels, frozenset((p, v) for v, (parents, _) in tables.items() for p in parents))
    cpts = {
        v: Cpt(v, parents, composed.get(v).cardinality,
               tuple(composed.get(p).cardinality for p in parents), table)
        for v, (parents, table) in tables.items()
    }
    return BayesNet(composed, dag, cpts, alpha=0.0)


def truth_networks(spec: FixtureSpec) -> dict[int, BayesNet]:
    """One network per household size that occurs."""
    return {k: truth_network(spec, k) for k, p in enumerate(_size_shares(spec), start=1) if p > 0}


# --------------------
# Drawing
# --------------------

def _size_counts(spec: FixtureSpec, rng: np.random.Generator) -> np.ndarray:
    """Households per size, drawn one household at a time while persons fit in population_size."""
    sizes = np.arange(1, spec.max_size + 1)
    shares = _size_shares(spec)
    n = int(spec.population_size / float(shares @ sizes) * 1.2) + 10
    while True:
        size = rng.choice(sizes, size=n, p=shares / shares.sum())
        if size.sum() >= spec.population_size:
            break
        n *= 2
    size = size[np.cumsum(size) <= spec.population_size]
    return np.bincount(size, minlength=spec.max_size + 1)[1:]


def draw_truth(spec: FixtureSpec, rng: np.random.Generator) -> tuple[pd.DataFrame, pd.DataFrame]:
    """
    Truth households and persons as frames (raw integer ages, level strings elsewhere).

    Each size's households are drawn from its truth_network; ages are then spread
    uniformly within the sampled band.
    """
    schema = spec.schema()
    household_schema, person_schema = schema.by_level(HOUSEHOLD), schema.by_level(PERSON)
    networks = truth_networks(spec)

    household_codes, person_codes, owner = [], [], []
    offset = 0
    for k, n in enumerate(_size_counts(spec, rng), start=1):
        seed = int(rng.integers(0, 2**63))
        if n == 0:
            continue
        records = sample_joint(networks[k], int(n), seed)
        households, persons = decompose(ComposedTable(k, household_schema, person_schema, records))
        household_codes.append(households.records.codes)
        person_codes.append(persons.records.codes)
        owner.append(np.repeat(np.arange(offset, offset + n), k))
        offset += n

    if offset == 0:
        raise FixtureError(f"No household fits in a population of {spec.population_size}")
    h_codes, p_codes, owner = np.vstack(household_codes), np.vstack(person_codes), np.concatenate(owner)
    ids = np.asarray([f"T{i:07d}" for i in range(1, offset + 1)], dtype=object)

    def levels(part: Schema, codes: np.ndarray) -> dict[str, np.ndarray]:
        return {
            attr.label: np.asarray(attr.categories, dtype=object)[codes[:, j]]
            for j, attr in enumerate(part.attributes)
        }

    band = p_codes[:, person_schema.labels.index("AGEP")]
    person_columns = levels(person_schema, p_codes)
    person_columns["AGEP"] = rng.integers(np.asarray(AGE_EDGES[:-1])[band], np.asarray(AGE_EDGES[1:])[band])

    households = pd.DataFrame({"household_id": ids, **levels(household_schema, h_codes)})
    persons = pd.DataFrame({"household_id": ids[owner], **person_columns})
    return households, persons


def draw_sample(spec: FixtureSpec, households: pd.DataFrame, persons: pd.DataFrame,
                rng: np.random.Generator) -> tuple[pd.DataFrame, pd.DataFrame]:
    """Bernoulli household sample, inclusion probability min(1, fraction * bias[area])."""
    area = households["AREA"].map({a: i for i, a in enumerate(spec.areas)}).to_numpy(dtype=np.int64)
    p = np.minimum(1.0, spec.sample_fraction * np.asarray(spec.bias)[area])
    keep = rng.random(len(households)) < p
    sampled = households[keep]
    return sampled, persons[persons["household_id"].isin(set(sampled["household_id"]))]


def census_tables(spec: FixtureSpec, households: pd.DataFrame, persons: pd.DataFrame) -> dict[str, MarginalConstraint]:
    schema = spec.schema()
    population = Population(
        Households(households["household_id"], encode_frame(households, schema.by_level(HOUSEHOLD))),
        Persons(persons["household_id"], encode_frame(persons, schema.by_level(PERSON))),
    )
    household_records = population.household_records(size_label="NP", threshold=spec.threshold)
    person_records = population.person_records()

    out = {}
    for name, axes in CENSUS_TABLES:
        level = HOUSEHOLD if name.startswith("household") else PERSON
        records = household_records if level == HOUSEHOLD else person_records
        out[name] = MarginalConstraint(axes, tabulate(records, axes).cells, level, name)
    return out


# --------------------
# Files
# --------------------

def _toml_value(value) -> str:
    return json.dumps(value)


def render_config(spec: FixtureSpec, files: FixtureFiles, seed: int) -> str:
    """A runnable pipeline config for the fixture, paths relative to the fixture root."""
    def rel(p) -> str:
        return Path(p).relative_to(files.root).as_posix()

    lines = [f"seed = {int(seed)}", 'output_dir = "output"', "", "[schema]", 'household_id = "household_id"', ""]
    for attr in spec.schema():
        lines.append("[[schema.attributes]]")
        for key, value in attr.to_dict().items():
            lines.append(f"{key} = {_toml_value(value)}")
        lines.append("")

    lines += ["[inputs]", f"households = {_toml_value(rel(files.sample_households))}",
              f"persons = {_toml_value(rel(files.sample_persons))}", ""]
    for path in files.marginals:
        lines += ["[[inputs.marginals]]", f"path = {_toml_value(rel(path))}", ""]

    lines += [
        "[generation]",
        'conditional = ["AREA", "AGEP", "RACWHT"]',
        'residence = "AREA"',
        'size_label = "NP"',
        f"threshold = {spec.threshold}",
        'member_order = "AGEP"',
        'focused_edges = ["AREA -> HINCP", "HINCP -> VEH"]',
        "",
        "[ipf]",
        "tol = 1e-6",
        "max_iter = 200",
        "skip_infeasible = true",
        "pool_strata = true",
        "",
        "[validation]",
        f"truth = {_toml_value(rel(files.truth_households.parent))}",
        'groupings = [["AREA", "AGEP", "RACWHT"], ["AREA", "NP"], ["HINCP", "SEX"], ["AREA", "VEH"]]',
        'associations = [["AGEP"], ["AGEP", "SEX", "RACWHT"]]',
        "",
        "[[validation.diversity]]",
        'attributes = ["AGEP", "SEX", "RACWHT", "HINCP", "VEH"]',
        'level = "household"',
        "",
    ]
    return "\n".join(lines)


def _write(frame: pd.DataFrame, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, lineterminator="\n")
    return path


def make_fixture(spec: FixtureSpec, seed: int, out_dir) -> FixtureFiles:
    """
    Write truth/ (population and networks), sample/, census/ and pipeline.toml under
    `out_dir`. The same FixtureSpec and seed give byte-identical files.
    """
    root = Path(out_dir).resolve()
    truth_h, truth_p = draw_truth(spec, stage_rng(seed, "fixture"))
    sample_h, sample_p = draw_sample(spec, truth_h, truth_p, stage_rng(seed, "fixture-sample"))

    files = FixtureFiles(
        root=root,
        truth_households=_write(truth_h, root / "truth" / "households.csv"),
        truth_persons=_write(truth_p, root / "truth" / "persons.csv"),
        sample_households=_write(sample_h, root / "sample" / "households.csv"),
        sample_persons=_write(sample_p, root / "sample" / "persons.csv"),
    )
    for k, net in truth_networks(spec).items():
        files.networks[k] = net.save(root / "truth" / f"network_{k}.json")
    schema = spec.schema()
    marginal_schema = Schema(schema.attributes + (size_attribute("NP", spec.threshold),))
    for name, constraint in census_tables(spec, truth_h, truth_p).items():
        files.marginals.append(write_marginal(root / "census" / f"{name}.csv", constraint, marginal_schema))

    files.config = root / "pipeline.toml"
    files.config.write_text(render_config(spec, files, seed), encoding="utf-8")
    logger.info(
        "Fixture: %s household(s) / %s person(s) in truth, %s / %s sampled",
        len(truth_h), len(truth_p), len(sample_h), len(sample_p),
    )
    return files
