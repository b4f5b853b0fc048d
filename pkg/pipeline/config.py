# pipeline/config.py
from __future__ import annotations

import logging

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Mapping

from django.conf import settings

from composition.households import size_attribute
from composition.services import MemberOrdering
from core.exceptions import PopSynthError
from dag_learn.dag import ConstraintError, Edge, parse_edge
from dag_learn.discovery import DiscoveryParams, ForestParams
from dag_learn.services import ALL_METHODS, DagMethod
from tabular.schema import HOUSEHOLD, PERSON, Schema, SchemaError

logger = logging.getLogger(__name__)

# Bin edges for continuous attributes declared without levels or bin_edges.
DEFAULT_BIN_EDGES: dict[str, tuple[float, ...]] = {
    "JWMNP": (0, 15, 30, 45, 60, 90, 140),
}


class ConfigError(PopSynthError):
    pass


def _with_default_edges(items) -> list:
    out = []
    for item in items:
        if isinstance(item, Mapping) and item.get("levels") is None and item.get("bin_edges") is None \
                and item.get("label") in DEFAULT_BIN_EDGES:
            item = {**item, "bin_edges": list(DEFAULT_BIN_EDGES[item["label"]])}
        out.append(item)
    return out


@dataclass(frozen=True)
class MarginalInput:
    path: Path
    level: str | None = None


@dataclass(frozen=True)
class DiversitySet:
    attributes: tuple[str, ...]
    level: str = HOUSEHOLD


@dataclass(frozen=True)
class PipelineConfig:
    """Everything one synthesis run needs. Paths are absolute once loaded."""

    schema: Schema
    households_path: Path
    persons_path: Path
    household_id: str = "household_id"
    marginals: tuple[MarginalInput, ...] = ()

    conditional: tuple[str, ...] = ()
    residence: str = "AREA"
    size_label: str = "NP"
    threshold: int = 5
    ordering: MemberOrdering = field(default_factory=MemberOrdering)
    focused_edges: tuple[Edge, ...] = ()
    forbidden_edges: tuple[Edge, ...] = ()

    methods: tuple[DagMethod, ...] = ALL_METHODS
    folds: int = 5
    discovery: DiscoveryParams = field(default_factory=DiscoveryParams)
    max_indegree: int | None = None
    parent_config_cap: int | None = None

    alpha: float = 1.0

    ipf_tol: float = 1e-6
    ipf_max_iter: int = 200
    skip_infeasible: bool = True
    pool_strata: bool = True
    stochastic_integerization: bool = False

    truth_dir: Path | None = None
    groupings: tuple[tuple[str, ...], ...] = ()
    diversity: tuple[DiversitySet, ...] = ()
    associations: tuple[tuple[str, ...], ...] = ()

    seed: int = 0
    output_dir: Path = Path("output")
    source: Path | None = None

    def __post_init__(self):
        self.validate()

    # -------------------------------------------------------------------------
    # Derived views
    # -------------------------------------------------------------------------
    @property
    def household_schema(self) -> Schema:
        return self.schema.by_level(HOUSEHOLD)

    @property
    def person_schema(self) -> Schema:
        return self.schema.by_level(PERSON)

    @property
    def sizes(self) -> list[int]:
        return list(range(1, self.threshold + 1))

    @property
    def marginal_schema(self) -> Schema:
        """The schema plus the derived household-size attribute marginals may use."""
        return Schema(self.schema.attributes + (size_attribute(self.size_label, self.threshold),))

    def input_paths(self) -> list[Path]:
        return [self.households_path, self.persons_path] + [m.path for m in self.marginals]

    def with_overrides(self, *, seed: int | None = None, output_dir=None) -> "PipelineConfig":
        changes: dict[str, Any] = {}
        if seed is not None:
            changes["seed"] = int(seed)
        if output_dir is not None:
            changes["output_dir"] = Path(output_dir).resolve()
        return replace(self, **changes) if changes else self

    # -------------------------------------------------------------------------
    # Validation
    # -------------------------------------------------------------------------
    def validate(self) -> None:
        try:
            self.schema.require_composable()
        except SchemaError as e:
            raise ConfigError(str(e))
        labels = set(self.schema.labels)

        unknown = [c for c in self.conditional if c not in labels]
        if unknown:
            raise ConfigError(f"Conditional labels {unknown} are not in the schema")
        if self.threshold < 1:
            raise ConfigError(f"Household-size threshold must be >= 1, got {self.threshold}")
        if self.folds < 2:
            raise ConfigError(f"Cross-validation needs at least 2 folds, got {self.folds}")
        if self.alpha <= 0:
            raise ConfigError(f"Smoothing alpha must be > 0, got {self.alpha}")
        if self.residence not in self.household_schema:
            raise ConfigError(f"Residence label {self.residence!r} is not a household attribute")
        if self.size_label in labels:
            raise ConfigError(f"Size label {self.size_label!r} clashes with a schema attribute")
        if not self.methods:
            raise ConfigError("At least one DAG method is required")
        if self.ordering.primary and self.ordering.primary not in self.person_schema:
            raise ConfigError(f"Member ordering attribute {self.ordering.primary!r} is not a person attribute")
        for u, v in self.focused_edges + self.forbidden_edges:
            for n in (u, v):
                if n not in labels:
                    raise ConfigError(f"Edge {u} -> {v} references unknown attribute {n!r}")

        known = labels | {self.size_label}
        for group in self.groupings + self.associations + tuple(d.attributes for d in self.diversity):
            bad = [a for a in group if a not in known]
            if bad:
                raise ConfigError(f"Validation attributes {bad} are not in the schema")
        for group in self.associations:
            if any(a not in self.person_schema for a in group):
                raise ConfigError(f"Association sets must be person attributes, got {list(group)}")

    # -------------------------------------------------------------------------
    # Loading
    # -------------------------------------------------------------------------
    @classmethod
    def from_toml(cls, path, *, seed: int | None = None, output_dir=None) -> "PipelineConfig":
        path = Path(path).resolve()
        if not path.exists():
            raise ConfigError(f"Config file not found: {path}")
        try:
            with path.open("rb") as f:
                data = tomllib.load(f)
        except tomllib.TOMLDecodeError as e:
            raise ConfigError(f"{path.name}: {e}")
        config = cls.from_dict(data, base_dir=path.parent, source=path)
        return config.with_overrides(seed=seed, output_dir=output_dir)

    @classmethod
    def from_dict(cls, data: Mapping, *, base_dir=None, source: Path | None = None) -> "PipelineConfig":
        base = Path(base_dir or ".").resolve()
        defaults = getattr(settings, "POPSYNTH", {}) or {}

        def resolve(p) -> Path:
            p = Path(str(p))
            return p if p.is_absolute() else (base / p).resolve()

        def section(name) -> Mapping:
            value = data.get(name) or {}
            if not isinstance(value, Mapping):
                raise ConfigError(f"[{name}] must be a table")
            return value

        schema_sec = section("schema")
        inputs = section("inputs")
        gen = section("generation")
        dag = section("dag")
        fit = section("fit")
        ipf = section("ipf")
        val = section("validation")

        try:
            schema = Schema.from_list(_with_default_edges(schema_sec.get("attributes") or []))
        except (SchemaError, TypeError) as e:
            raise ConfigError(f"[schema]: {e}")

        for key in ("households", "persons"):
            if not inputs.get(key):
                raise ConfigError(f"[inputs] needs a {key!r} path")

        marginals = []
        for item in inputs.get("marginals") or []:
            if isinstance(item, str):
                item = {"path": item}
            if not item.get("path"):
                raise ConfigError("[[inputs.marginals]] entries need a path")
            marginals.append(MarginalInput(resolve(item["path"]), item.get("level")))

        try:
            focused = tuple(parse_edge(e) for e in gen.get("focused_edges") or [])
            forbidden = tuple(parse_edge(e) for e in gen.get("forbidden_edges") or [])
            methods = tuple(DagMethod.parse(m) for m in dag.get("methods") or [m.value for m in ALL_METHODS])
        except (ConstraintError, ValueError) as e:
            raise ConfigError(str(e))

        try:
            forest = ForestParams(
                trees=int(dag.get("rf_trees", 50)),
                max_depth=int(dag.get("rf_max_depth", 8)),
                min_leaf=int(dag.get("rf_min_leaf", 5)),
                features_per_split=dag.get("rf_features_per_split"),
                seed=int(dag.get("rf_seed", 0)),
            )
            discovery = DiscoveryParams(
                top_m=int(dag.get("top_m", 2)),
                ols_alpha=float(dag.get("ols_alpha", 0.01)),
                importance_factor=float(dag.get("importance_factor", 2.0)),
                forest=forest,
            )
        except (TypeError, ValueError) as e:
            raise ConfigError(f"[dag]: {e}")

        member_order = gen.get("member_order", "AGEP")
        ordering = MemberOrdering(member_order or None, bool(gen.get("member_order_descending", True)))

        diversity = []
        for item in val.get("diversity") or []:
            if isinstance(item, Mapping):
                diversity.append(DiversitySet(tuple(item.get("attributes") or []), str(item.get("level", HOUSEHOLD))))
            else:
                diversity.append(DiversitySet(tuple(item)))

        truth = val.get("truth")
        output_dir = data.get("output_dir") or defaults.get("OUTPUT_DIR") or "output"
        cap = dag.get("parent_config_cap", defaults.get("PARENT_CONFIG_CAP"))

        try:
            return cls(
                schema=schema,
                households_path=resolve(inputs["households"]),
                persons_path=resolve(inputs["persons"]),
                household_id=str(schema_sec.get("household_id", "household_id")),
                marginals=tuple(marginals),
                conditional=tuple(gen.get("conditional") or ()),
                residence=str(gen.get("residence", "AREA")),
                size_label=str(gen.get("size_label", "NP")),
                threshold=int(gen.get("threshold", 5)),
                ordering=ordering,
                focused_edges=focused,
                forbidden_edges=forbidden,
                methods=methods,
                folds=int(dag.get("folds", 5)),
                discovery=discovery,
                max_indegree=dag.get("max_indegree"),
                parent_config_cap=int(cap) if cap else None,
                alpha=float(fit.get("alpha", 1.0)),
                ipf_tol=float(ipf.get("tol", 1e-6)),
                ipf_max_iter=int(ipf.get("max_iter", 200)),
                skip_infeasible=bool(ipf.get("skip_infeasible", True)),
                pool_strata=bool(ipf.get("pool_strata", True)),
                stochastic_integerization=bool(ipf.get("stochastic_integerization", False)),
                truth_dir=resolve(truth) if truth else None,
                groupings=tuple(tuple(g) for g in val.get("groupings") or ()),
                diversity=tuple(diversity),
                associations=tuple(tuple(a) for a in val.get("associations") or ()),
                seed=int(data.get("seed", defaults.get("SEED", 0))),
                output_dir=resolve(output_dir),
                source=source,
            )
        except (TypeError, ValueError) as e:
            raise ConfigError(f"Invalid configuration value: {e}")
