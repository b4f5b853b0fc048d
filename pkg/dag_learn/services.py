# dag_learn/services.py
from __future__ import annotations

import enum
import logging
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import networkx as nx
import numpy as np

from bn_sample.network import fit_cpts, log_likelihood
from tabular.tables import RecordTable

from .dag import ConstraintError, Dag, Edge, EdgeConstraints, find_cycle
from .discovery import DiscoveryParams, discover_edges_ols, discover_edges_rf
from .scoring import AicScorer, ComplexityError, parameter_count
from .search import hill_climb

logger = logging.getLogger(__name__)


class DagMethod(str, enum.Enum):
    FEB = "FEB"
    SL = "SL"
    HASL = "HASL"
    FEB_PLUS_SL = "FEB+SL"
    OLSAFE = "OLSAFE"
    RLAFE = "RLAFE"

    @classmethod
    def parse(cls, text: str) -> "DagMethod":
        key = str(text).strip().upper().replace("_PLUS_", "+")
        for m in cls:
            if m.value == key:
                return m
        raise ValueError(f"Unknown DAG method {text!r}; expected one of {[m.value for m in cls]}")

    @property
    def slug(self) -> str:
        """File-name form: FEB+SL -> feb_sl."""
        return self.value.lower().replace("+", "_")

    @property
    def rank(self) -> int:
        return list(DagMethod).index(self)


ALL_METHODS = tuple(DagMethod)


@dataclass(frozen=True)
class ScoredDag:
    dag: Dag
    mean_aic: float
    std_aic: float
    method: DagMethod
    fold_scores: tuple[float, ...] = field(default=(), compare=False)

    def __post_init__(self):
        if self.std_aic < 0:
            raise ValueError(f"std_aic must be >= 0, got {self.std_aic}")

    @property
    def edge_count(self) -> int:
        return len(self.dag)

    def summary(self) -> dict:
        return {
            "method": self.method.value,
            "mean": self.mean_aic,
            "std": self.std_aic,
            "edges": self.edge_count,
        }


# --------------------
# Constraint helpers
# --------------------

def expand_member_edges(edges: Iterable[Edge], labels: Sequence[str], person_labels: Sequence[str],
                        size: int) -> frozenset[Edge]:
    """
    Rewrite edges written against base person labels to composed labels.

    A base person label on either side stands for every member slot _1.._k; when both
    sides are person labels the slots are paired (AGEP -> SEX gives AGEP_i -> SEX_i).
    """
    person = set(person_labels)
    known = set(labels)
    out: set[Edge] = set()
    for u, v in edges:
        u_slots = [f"{u}_{i}" for i in range(1, size + 1)] if u in person else [u]
        v_slots = [f"{v}_{i}" for i in range(1, size + 1)] if v in person else [v]
        if u in person and v in person:
            pairs = list(zip(u_slots, v_slots))
        else:
            pairs = [(a, b) for a in u_slots for b in v_slots]
        for a, b in pairs:
            if a not in known or b not in known:
                raise ConstraintError(f"Edge {u} -> {v} expands to {a} -> {b}, which is not a column")
            out.add((a, b))
    return frozenset(out)


def root_forbidden_edges(labels: Sequence[str], conditional: Iterable[str]) -> frozenset[Edge]:
    """Every non-conditional -> conditional edge, so conditional attributes stay roots."""
    conditional = set(conditional)
    return frozenset((u, v) for u in labels for v in labels if v in conditional and u not in conditional)


# --------------------
# Merging
# --------------------

def _edge_contribution(g: nx.DiGraph, edge: Edge, scorer: AicScorer | None) -> float:
    """Score lost by deleting `edge` from the current graph (0 without a scorer)."""
    if scorer is None:
        return 0.0
    u, v = edge
    parents = set(g.predecessors(v))
    try:
        return scorer.local_score(v, parents) - scorer.local_score(v, parents - {u})
    except ComplexityError:
        return -math.inf


def merge_dags(primary: Dag, additions: Iterable[Edge], protected: Iterable[Edge] = (), *,
               scorer: AicScorer | None = None) -> Dag:
    """
    Union of `primary` and `additions`, then repeatedly break cycles by deleting the
    non-protected cycle edge with the smallest AIC contribution (ties by edge label).
    """
    protected = frozenset(tuple(e) for e in protected)
    edges = set(primary.edges) | {tuple(e) for e in additions}
    missing = sorted(protected - edges)
    if missing:
        raise ValueError(f"Protected edges {missing} are in neither the primary DAG nor the additions")

    g = nx.DiGraph()
    g.add_nodes_from(primary.nodes)
    for u, v in sorted(edges):
        if u not in g or v not in g:
            raise ConstraintError(f"Edge {u} -> {v} references an unknown node")
        g.add_edge(u, v)

    removed = []
    while True:
        cycle = find_cycle(g)
        if not cycle:
            break
        candidates = [e for e in cycle if e not in protected]
        if not candidates:
            text = ", ".join(f"{u} -> {v}" for u, v in cycle)
            raise ConstraintError(f"Cycle made only of protected edges: {text}")
        drop = min(candidates, key=lambda e: (_edge_contribution(g, e, scorer), e))
        g.remove_edge(*drop)
        removed.append(drop)

    if removed:
        logger.info("Cycle repair removed %s edge(s): %s", len(removed), removed)
    return Dag(primary.nodes, frozenset(g.edges()))


# --------------------
# The six construction methods
# --------------------

def _discovered(method: DagMethod, data: RecordTable, constraints: EdgeConstraints,
                params: DiscoveryParams) -> frozenset[Edge]:
    if method is DagMethod.OLSAFE:
        found = discover_edges_ols(data, None, params.top_m, alpha=params.ols_alpha)
    else:
        found = discover_edges_rf(
            data, None, params.top_m, params.forest, importance_factor=params.importance_factor,
        )
    return frozenset(e for e in found if e not in constraints.forbidden)


def build_dag(method: DagMethod | str, data: RecordTable, constraints: EdgeConstraints | None = None,
              params: DiscoveryParams | None = None, *, scorer: AicScorer | None = None,
              max_indegree: int | None = None) -> Dag:
    method = method if isinstance(method, DagMethod) else DagMethod.parse(method)
    constraints = constraints or EdgeConstraints()
    params = params or DiscoveryParams()
    scorer = scorer or AicScorer(data)
    focused = constraints.fixed

    def climb(cons: EdgeConstraints, start: Dag | None = None) -> Dag:
        return hill_climb(data, cons, scorer=scorer, start=start, max_indegree=max_indegree)

    if method is DagMethod.FEB:
        dag = climb(constraints)
    elif method is DagMethod.SL:
        dag = climb(constraints.without_fixed())
    elif method is DagMethod.HASL:
        sl = climb(constraints.without_fixed())
        dag = merge_dags(sl, focused, focused, scorer=scorer)
    elif method is DagMethod.FEB_PLUS_SL:
        feb = climb(constraints)
        sl = climb(constraints.without_fixed())
        dag = merge_dags(feb, sl.edges, focused, scorer=scorer)
    else:
        base = Dag(tuple(data.labels), focused)
        merged = merge_dags(base, _discovered(method, data, constraints, params), focused, scorer=scorer)
        dag = climb(constraints.with_fixed(merged.edges), start=merged)

    logger.info("%s produced %s edge(s)", method.value, len(dag))
    return dag


# --------------------
# Cross-validation and selection
# --------------------

def cross_validation_scores(dag: Dag, data: RecordTable, folds: int = 5, alpha: float = 1.0, *,
                            seed: int = 0) -> np.ndarray:
    """Held-out log-likelihood minus K for each fold of a seeded shuffle split."""
    if folds < 2:
        raise ValueError(f"Need at least 2 folds, got {folds}")
    n = len(data)
    if n < folds:
        raise ValueError(f"Cannot split {n} row(s) into {folds} folds")

    data = data.select(dag.nodes)
    cards = dict(zip(data.labels, data.schema.cardinalities))
    k = parameter_count(dag, cards)

    perm = np.random.default_rng(seed).permutation(n)
    blocks = np.array_split(perm, folds)
    scores = []
    for i, test in enumerate(blocks):
        train = np.sort(np.concatenate([b for j, b in enumerate(blocks) if j != i]))
        net = fit_cpts(dag, data.take(train), alpha)
        scores.append(log_likelihood(net, data.take(np.sort(test))) - k)
    return np.asarray(scores, dtype=float)


def cross_validate(dag: Dag, data: RecordTable, folds: int = 5, alpha: float = 1.0, *,
                   seed: int = 0) -> tuple[float, float]:
    """(mean, population std) of the per-fold held-out scores."""
    scores = cross_validation_scores(dag, data, folds, alpha, seed=seed)
    return float(np.mean(scores)), float(np.std(scores))


def select_best(scored: Sequence[ScoredDag]) -> ScoredDag:
    """Highest mean score; ties go to fewer edges, then method order."""
    if not scored:
        raise ValueError("select_best needs at least one candidate")
    return min(scored, key=lambda s: (-s.mean_aic, s.edge_count, s.method.rank))


def learn_dags(data: RecordTable, constraints: EdgeConstraints, methods: Sequence[DagMethod] = ALL_METHODS,
               params: DiscoveryParams | None = None, *, folds: int = 5, alpha: float = 1.0, seed: int = 0,
               max_indegree: int | None = None, parent_config_cap: int | None = None) -> list[ScoredDag]:
    """Build and cross-validate every requested method on one composed table."""
    constraints.check_nodes(data.labels)
    scorer = AicScorer(data, parent_config_cap=parent_config_cap)
    out = []
    for method in methods:
        dag = build_dag(method, data, constraints, params, scorer=scorer, max_indegree=max_indegree)
        scores = cross_validation_scores(dag, data, folds, alpha, seed=seed)
        out.append(ScoredDag(dag, float(np.mean(scores)), float(np.std(scores)), method, tuple(scores.tolist())))
        logger.info("%s: mean=%.3f std=%.3f edges=%s", method.value, out[-1].mean_aic, out[-1].std_aic, len(dag))
    return out


def summary_document(size: int, scored: Sequence[ScoredDag], best: ScoredDag) -> dict:
    return {
        "size": size,
        "methods": [s.summary() for s in scored],
        "selected": best.method.value,
        "links": best.edge_count,
    }
