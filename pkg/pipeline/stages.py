# pipeline/stages.py
"""
The synthesis stages. Each stage reads only persisted files (config inputs or earlier
stage outputs under the output directory), so any stage can be re-run on its own.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np
import pandas as pd

from bn_sample.network import BayesNet, fit_cpts
from bn_sample.sampling import ConditionalPopulation, sample_conditional
from composition.households import ComposedTable, Households, Persons, composed_schema
from composition.services import compose_households, decompose, replicate_large, split_by_size, take_households
from core.exceptions import PopSynthError
from core.seeds import derive_seed, stage_rng
from dag_learn.dag import Dag, EdgeConstraints
from dag_learn.services import (
    DagMethod,
    expand_member_edges,
    learn_dags,
    root_forbidden_edges,
    select_best,
    summary_document,
)
from ipf.constraints import MarginalConstraint, WeightedSample, read_marginal, write_weights
from ipf.services import (
    build_conditional_population,
    conditional_labels,
    household_targets,
    integerize,
    rake_household_weights,
)
from metrics.report import MetricsReport
from metrics.services import (
    Population,
    association_check,
    grouping_comparisons,
    marginal_report,
    population_diversity,
    sampling_zero_recovery,
    write_marginal_report,
)
from tabular.io import read_records, write_records
from tabular.schema import HOUSEHOLD
from tabular.tables import RecordTable

from .config import PipelineConfig

logger = logging.getLogger(__name__)


class MissingArtifactError(PopSynthError):
    pass


@dataclass(frozen=True)
class Artifacts:
    """File layout of one output directory."""

    root: Path

    def composed(self, k: int) -> Path:
        return self.root / f"composed_{k}.csv"

    @property
    def overflow_households(self) -> Path:
        return self.root / "overflow_households.csv"

    @property
    def overflow_persons(self) -> Path:
        return self.root / "overflow_persons.csv"

    def dag(self, method: DagMethod, k: int) -> Path:
        return self.root / "dags" / f"dag_{method.slug}_{k}.dot"

    def scores(self, method: DagMethod, k: int) -> Path:
        return self.root / "dags" / f"dag_{method.slug}_{k}.json"

    def summary(self, k: int) -> Path:
        return self.root / "dags" / f"summary_{k}.json"

    def model(self, k: int) -> Path:
        return self.root / f"model_{k}.json"

    @property
    def weights(self) -> Path:
        return self.root / "weights.csv"

    @property
    def targets(self) -> Path:
        return self.root / "targets.json"

    def condpop(self, k: int) -> Path:
        return self.root / f"condpop_{k}.csv"

    @property
    def households(self) -> Path:
        return self.root / "households.csv"

    @property
    def persons(self) -> Path:
        return self.root / "persons.csv"

    @property
    def baseline_households(self) -> Path:
        return self.root / "baseline" / "households.csv"

    @property
    def baseline_persons(self) -> Path:
        return self.root / "baseline" / "persons.csv"

    @property
    def metrics(self) -> Path:
        return self.root / "metrics.json"

    @property
    def marginal_report(self) -> Path:
        return self.root / "marginal_report"


@dataclass
class StageOutcome:
    stage: str
    outputs: list[Path] = field(default_factory=list)
    detail: dict = field(default_factory=dict)


@dataclass(frozen=True)
class Stage:
    name: str
    run: Callable[[PipelineConfig, Artifacts], StageOutcome]
    inputs: Callable[[PipelineConfig, Artifacts], list[Path]]


# --------------------
# Reading and writing
# --------------------

def _write_json(path: Path, data) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(data, indent=2) + "\n", encoding="utf-8")
    return path


def _require(path: Path, producer: str) -> Path:
    if not path.exists():
        raise MissingArtifactError(f"{path.name} not found in {path.parent}; run the {producer} stage first")
    return path


def read_population(households_path, persons_path, config: PipelineConfig) -> Population:
    hid = config.household_id
    h_ids, h_records = read_records(households_path, config.household_schema, id_columns=[hid])
    p_ids, p_records = read_records(persons_path, config.person_schema, id_columns=[hid])
    return Population(Households(h_ids[hid], h_records), Persons(p_ids[hid], p_records))


def write_population(households: Households, persons: Persons, households_path, persons_path,
                     config: PipelineConfig) -> list[Path]:
    hid = config.household_id
    return [
        write_records(households_path, households.records, ids={hid: households.ids}),
        write_records(persons_path, persons.records, ids={hid: persons.household_ids}),
    ]


def read_sample(config: PipelineConfig) -> Population:
    return read_population(config.households_path, config.persons_path, config)


def read_marginals(config: PipelineConfig) -> list[MarginalConstraint]:
    return [read_marginal(m.path, config.marginal_schema, level=m.level) for m in config.marginals]


def read_composed(config: PipelineConfig, art: Artifacts, k: int) -> ComposedTable:
    hid = config.household_id
    schema = composed_schema(config.household_schema, config.person_schema, k)
    ids, records = read_records(_require(art.composed(k), "compose"), schema, id_columns=[hid])
    return ComposedTable(k, config.household_schema, config.person_schema, records, ids[hid])


def _read_targets(config: PipelineConfig, art: Artifacts) -> dict[int, dict[int, int]]:
    data = json.loads(_require(art.targets, "condpop").read_text(encoding="utf-8"))
    attr = config.household_schema.get(config.residence)
    return {
        int(k): {attr.code_of(area): int(n) for area, n in per_area.items()}
        for k, per_area in data["households"].items()
    }


def _write_targets(config: PipelineConfig, art: Artifacts, targets: dict[int, dict[int, int]]) -> Path:
    attr = config.household_schema.get(config.residence)
    return _write_json(art.targets, {
        "stratum": config.residence,
        "threshold": config.threshold,
        "households": {
            str(k): {attr.categories[a]: n for a, n in sorted(per_area.items())}
            for k, per_area in sorted(targets.items())
        },
    })


# --------------------
# compose
# --------------------

def run_compose(config: PipelineConfig, art: Artifacts) -> StageOutcome:
    sample = read_sample(config)
    split = split_by_size(sample.households, sample.persons, config.threshold)
    outcome = StageOutcome("compose", detail={"households": {}, "empty_households": split.empty_households})

    for k in config.sizes:
        if k in split.buckets:
            composed = compose_households(*split.buckets[k], k, config.ordering)
        else:
            schema = composed_schema(config.household_schema, config.person_schema, k)
            composed = ComposedTable(k, config.household_schema, config.person_schema, RecordTable.empty(schema), [])
        outcome.outputs.append(
            write_records(art.composed(k), composed.records, ids={config.household_id: composed.household_ids})
        )
        outcome.detail["households"][str(k)] = len(composed)

    over_h, over_p = split.overflow
    outcome.outputs += write_population(over_h, over_p, art.overflow_households, art.overflow_persons, config)
    outcome.detail["overflow_households"] = len(over_h)
    return outcome


# --------------------
# learn-dag
# --------------------

def edge_constraints(config: PipelineConfig, composed: ComposedTable) -> EdgeConstraints:
    labels = composed.schema.labels
    person = config.person_schema.labels
    fixed = expand_member_edges(config.focused_edges, labels, person, composed.size)
    forbidden = expand_member_edges(config.forbidden_edges, labels, person, composed.size)
    roots = conditional_labels(composed, config.conditional)
    return EdgeConstraints(fixed, forbidden | root_forbidden_edges(labels, roots))


def run_learn_dag(config: PipelineConfig, art: Artifacts) -> StageOutcome:
    outcome = StageOutcome("learn-dag", detail={"selected": {}, "skipped": []})
    for k in config.sizes:
        composed = read_composed(config, art, k)
        if len(composed) < config.folds:
            logger.warning("Size %s has %s sampled household(s), fewer than %s folds; no model is learned",
                           k, len(composed), config.folds)
            art.summary(k).unlink(missing_ok=True)
            outcome.detail["skipped"].append(k)
            continue

        scored = learn_dags(
            composed.records,
            edge_constraints(config, composed),
            config.methods,
            config.discovery,
            folds=config.folds,
            alpha=config.alpha,
            seed=derive_seed(config.seed, "cv", k),
            max_indegree=config.max_indegree,
            parent_config_cap=config.parent_config_cap,
        )
        best = select_best(scored)
        for s in scored:
            dot = art.dag(s.method, k)
            dot.parent.mkdir(parents=True, exist_ok=True)
            dot.write_text(s.dag.to_dot(f"{s.method.value}_{k}"), encoding="utf-8")
            scores = dict(s.summary(), size=k, fold_scores=list(s.fold_scores))
            outcome.outputs += [dot, _write_json(art.scores(s.method, k), scores)]
        outcome.outputs.append(_write_json(art.summary(k), summary_document(k, scored, best)))
        outcome.detail["selected"][str(k)] = best.method.value
        logger.info("Size %s: selected %s (%s link(s))", k, best.method.value, best.edge_count)
    return outcome


def _learn_inputs(config: PipelineConfig, art: Artifacts) -> list[Path]:
    return [art.composed(k) for k in config.sizes]


# --------------------
# fit
# --------------------

def _selected_dag(art: Artifacts, k: int) -> Dag:
    summary = json.loads(art.summary(k).read_text(encoding="utf-8"))
    method = DagMethod.parse(summary["selected"])
    return Dag.from_dot(_require(art.dag(method, k), "learn-dag").read_text(encoding="utf-8"))


def run_fit(config: PipelineConfig, art: Artifacts) -> StageOutcome:
    outcome = StageOutcome("fit", detail={"nodes": {}})
    for k in config.sizes:
        if not art.summary(k).exists():
            art.model(k).unlink(missing_ok=True)
            continue
        composed = read_composed(config, art, k)
        net = fit_cpts(_selected_dag(art, k), composed.records, config.alpha)
        outcome.outputs.append(net.save(art.model(k)))
        outcome.detail["nodes"][str(k)] = len(net.nodes)
    return outcome


def _fit_inputs(config: PipelineConfig, art: Artifacts) -> list[Path]:
    paths = []
    for k in config.sizes:
        paths += [art.composed(k), art.summary(k)] + [art.dag(m, k) for m in config.methods]
    return paths


# --------------------
# condpop
# --------------------

def _household_targets(config: PipelineConfig, constraints: list[MarginalConstraint],
                       sample: WeightedSample) -> dict[int, dict[int, int]]:
    """{k: {area code: households}} from the (area x size) marginal, else from the raked weights."""
    for c in constraints:
        if c.level == HOUSEHOLD and {config.residence, config.size_label} <= set(c.axes):
            return household_targets(c, stratum=config.residence, size_label=config.size_label)

    logger.warning("No %s x %s household marginal; household targets come from the raked weights",
                   config.residence, config.size_label)
    n_areas = config.household_schema.get(config.residence).cardinality
    cells = sample.households.column(config.size_label) * n_areas + sample.households.column(config.residence)
    sums = np.bincount(cells, weights=sample.weights, minlength=(config.threshold + 1) * n_areas)
    counts = integerize(sums, int(round(sums.sum())))
    out: dict[int, dict[int, int]] = {}
    for cell in np.flatnonzero(counts):
        out.setdefault(int(cell) // n_areas + 1, {})[int(cell) % n_areas] = int(counts[cell])
    return out


def run_condpop(config: PipelineConfig, art: Artifacts) -> StageOutcome:
    sample = read_sample(config)
    constraints = read_marginals(config)
    weighted = WeightedSample.from_households(sample.households, sample.persons,
                                              size_label=config.size_label, threshold=config.threshold)
    outcome = StageOutcome("condpop", detail={"households": {}})
    if constraints:
        raked = rake_household_weights(weighted, constraints, config.ipf_tol, config.ipf_max_iter,
                                       skip_infeasible=config.skip_infeasible)
        weighted = raked.sample
        deviation = float(raked.max_deviation) if np.isfinite(raked.max_deviation) else None
        outcome.detail.update(sweeps=raked.sweeps, converged=bool(raked.converged), max_deviation=deviation)
    outcome.outputs.append(write_weights(art.weights, weighted))

    targets = _household_targets(config, constraints, weighted)
    outcome.outputs.append(_write_targets(config, art, targets))

    position = pd.Index(weighted.ids)
    for k in config.sizes:
        composed = read_composed(config, art, k)
        weights = weighted.weights[position.get_indexer(composed.household_ids)]
        rng = stage_rng(config.seed, "integerize", k) if config.stochastic_integerization else None
        conditional = build_conditional_population(
            composed, [], targets.get(k, {}), config.conditional,
            stratum=config.residence, weights=weights, pool_strata=config.pool_strata, rng=rng,
        )
        outcome.outputs.append(write_records(art.condpop(k), conditional.records))
        outcome.detail["households"][str(k)] = len(conditional)
    return outcome


def _condpop_inputs(config: PipelineConfig, art: Artifacts) -> list[Path]:
    return config.input_paths() + [art.composed(k) for k in config.sizes]


# --------------------
# generate
# --------------------

def _missing_model_message(config: PipelineConfig, art: Artifacts, k: int) -> str:
    if not art.composed(k).exists() or len(read_composed(config, art, k)) >= config.folds:
        return f"No model for size {k}; run the learn-dag and fit stages first"
    return (
        f"No model for size {k}: learn-dag skipped it because the sample holds fewer than "
        f"{config.folds} households of that size, yet the census expects some. Lower [dag] folds "
        f"or add sampled households of size {k}"
    )


def run_generate(config: PipelineConfig, art: Artifacts) -> StageOutcome:
    targets = _read_targets(config, art)
    households: list[Households] = []
    persons: list[Persons] = []
    outcome = StageOutcome("generate", detail={"households": {}})

    for k in config.sizes:
        path = _require(art.condpop(k), "condpop")
        labels = list(pd.read_csv(path, nrows=0).columns)
        if not art.model(k).exists():
            if sum(targets.get(k, {}).values()):
                raise MissingArtifactError(_missing_model_message(config, art, k))
            continue
        net = BayesNet.load(art.model(k))
        _, records = read_records(path, net.schema.subset(labels))
        if not len(records):
            continue
        generated = sample_conditional(net, ConditionalPopulation(records, size=k), derive_seed(config.seed, "generate", k))
        composed = ComposedTable.from_records(generated, config.household_schema, config.person_schema, size=k)
        h, p = decompose(composed, id_prefix=f"H{k}-")
        households.append(h)
        persons.append(p)
        outcome.detail["households"][str(k)] = len(h)

    overflow = read_population(_require(art.overflow_households, "compose"), art.overflow_persons, config)
    over_targets = targets.get(config.threshold + 1, {})
    h, p = replicate_large((overflow.households, overflow.persons), over_targets, stratum=config.residence,
                           rng=stage_rng(config.seed, "replicate"), pool_strata=config.pool_strata)
    households.append(h)
    persons.append(p)
    outcome.detail["households"]["overflow"] = len(h)

    all_h = Households(np.concatenate([x.ids for x in households]), RecordTable.concat([x.records for x in households]))
    all_p = Persons(np.concatenate([x.household_ids for x in persons]), RecordTable.concat([x.records for x in persons]))
    outcome.outputs += write_population(all_h, all_p, art.households, art.persons, config)
    outcome.detail.update(total_households=len(all_h), total_persons=len(all_p))
    logger.info("Generated %s household(s) and %s person(s)", len(all_h), len(all_p))
    return outcome


def _generate_inputs(config: PipelineConfig, art: Artifacts) -> list[Path]:
    paths = [art.targets, art.overflow_households, art.overflow_persons]
    for k in config.sizes:
        paths += [art.condpop(k), art.model(k)]
    return paths


# --------------------
# validate
# --------------------

def census_household_total(constraints: list[MarginalConstraint]) -> int | None:
    for c in constraints:
        if c.level == HOUSEHOLD:
            return int(round(c.total))
    return None


def replicated_baseline(sample: Population, total: int) -> Population:
    """Every sampled household weighted alike, integerized to `total` households."""
    counts = integerize(np.ones(len(sample.households)), total)
    rows = np.repeat(np.arange(len(sample.households)), counts)
    return Population(*take_households(sample.households, sample.persons, rows, id_prefix="B"))


def _counts(population: Population) -> dict[str, int]:
    return {"households": len(population.households), "persons": len(population.persons)}


def build_report(config: PipelineConfig, synthetic: Population, sample: Population, baseline: Population,
                 constraints: list[MarginalConstraint], truth: Population | None) -> MetricsReport:
    schema = config.marginal_schema
    sizing = {"size_label": config.size_label, "threshold": config.threshold}
    reference = truth if truth is not None else constraints
    groupings = config.groupings or tuple(c.axes for c in constraints)

    report = MetricsReport(populations={"synthetic": _counts(synthetic), "baseline": _counts(baseline),
                                        "sample": _counts(sample)})
    if truth is not None:
        report.populations["truth"] = _counts(truth)

    for label, population in (("synthetic", synthetic), ("baseline", baseline)):
        report.comparisons += grouping_comparisons(population, reference, groupings, schema,
                                                   population=label, **sizing)

    for d in config.diversity:
        base = population_diversity(baseline, d.attributes, level=d.level, label="baseline")
        syn = population_diversity(synthetic, d.attributes, level=d.level, label="synthetic")
        report.diversity += [base, replace(syn, reference_entropy=base.entropy)]
        if truth is not None:
            report.diversity.append(population_diversity(truth, d.attributes, level=d.level, label="truth"))
            for label, population in (("synthetic", synthetic), ("baseline", baseline)):
                report.sampling_zeros.append(
                    sampling_zero_recovery(truth, sample, population, d.attributes, level=d.level, label=label)
                )

    if truth is not None and config.associations:
        for k in config.sizes[1:]:
            ref = compose_households(truth.households, truth.persons, k, config.ordering)
            if not len(ref):
                continue
            for label, population in (("synthetic", synthetic), ("baseline", baseline)):
                table = compose_households(population.households, population.persons, k, config.ordering)
                if not len(table):
                    continue
                for attrs in config.associations:
                    report.associations.append(association_check(table, ref, attrs, population=label))
    return report


def run_validate(config: PipelineConfig, art: Artifacts) -> StageOutcome:
    synthetic = read_population(_require(art.households, "generate"), _require(art.persons, "generate"), config)
    sample = read_sample(config)
    constraints = read_marginals(config)
    truth = None
    if config.truth_dir is not None:
        truth = read_population(config.truth_dir / "households.csv", config.truth_dir / "persons.csv", config)

    total = census_household_total(constraints)
    if total is None:
        total = len(truth.households) if truth is not None else len(sample.households)
    baseline = replicated_baseline(sample, total)

    outcome = StageOutcome("validate")
    outcome.outputs += write_population(baseline.households, baseline.persons,
                                        art.baseline_households, art.baseline_persons, config)

    report = build_report(config, synthetic, sample, baseline, constraints, truth)
    frames = marginal_report(synthetic, truth if truth is not None else constraints,
                             config.groupings or tuple(c.axes for c in constraints), config.marginal_schema,
                             size_label=config.size_label, threshold=config.threshold)
    outcome.outputs += write_marginal_report(art.marginal_report, frames)
    outcome.outputs.append(report.save(art.metrics))
    outcome.detail = {"comparisons": len(report.comparisons), "reports": sorted(frames)}
    return outcome


def _validate_inputs(config: PipelineConfig, art: Artifacts) -> list[Path]:
    paths = [art.households, art.persons] + config.input_paths()
    if config.truth_dir is not None:
        paths += [config.truth_dir / "households.csv", config.truth_dir / "persons.csv"]
    return paths


STAGES: dict[str, Stage] = {
    s.name: s
    for s in (
        Stage("compose", run_compose, lambda config, art: [config.households_path, config.persons_path]),
        Stage("learn-dag", run_learn_dag, _learn_inputs),
        Stage("fit", run_fit, _fit_inputs),
        Stage("condpop", run_condpop, _condpop_inputs),
        Stage("generate", run_generate, _generate_inputs),
        Stage("validate", run_validate, _validate_inputs),
    )
}
STAGE_ORDER = tuple(STAGES)
