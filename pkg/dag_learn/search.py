# dag_learn/search.py
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Iterator

import networkx as nx

from tabular.tables import RecordTable

from .dag import ConstraintError, Dag, Edge, EdgeConstraints
from .scoring import AicScorer, ComplexityError

logger = logging.getLogger(__name__)

ADD = "add"
REMOVE = "remove"
REVERSE = "reverse"


@dataclass(frozen=True)
class Move:
    kind: str
    edge: Edge
    delta: float


class _SearchState:
    """Mutable working graph for one hill climb."""

    def __init__(self, nodes: tuple[str, ...], edges: set[Edge]):
        self.nodes = nodes
        self.graph = nx.DiGraph()
        self.graph.add_nodes_from(nodes)
        self.graph.add_edges_from(sorted(edges))

    def parents(self, v: str) -> set[str]:
        return set(self.graph.predecessors(v))

    def descendants(self) -> dict[str, set[str]]:
        return {n: nx.descendants(self.graph, n) for n in self.nodes}

    def apply(self, move: Move) -> None:
        u, v = move.edge
        if move.kind == ADD:
            self.graph.add_edge(u, v)
        elif move.kind == REMOVE:
            self.graph.remove_edge(u, v)
        else:
            self.graph.remove_edge(u, v)
            self.graph.add_edge(v, u)

    def dag(self) -> Dag:
        return Dag(self.nodes, frozenset(self.graph.edges()))


def legal_moves(state: _SearchState, constraints: EdgeConstraints, scorer: AicScorer,
                max_indegree: int | None = None) -> Iterator[Move]:
    """
    Every single add/remove/reverse move that keeps the graph acyclic, keeps fixed
    edges in place and adds no forbidden edge, with its score delta. Moves whose
    parent configurations exceed the scorer's cap are skipped.
    """
    desc = state.descendants()
    nodes = state.nodes
    g = state.graph
    local = scorer.local_score

    for u in nodes:
        for v in nodes:
            if u == v:
                continue
            pv = state.parents(v)
            try:
                if g.has_edge(u, v):
                    if (u, v) in constraints.fixed:
                        continue
                    drop = local(v, pv - {u}) - local(v, pv)
                    yield Move(REMOVE, (u, v), drop)

                    if (v, u) in constraints.forbidden:
                        continue
                    # Reversal is acyclic iff no other u ~> v path exists.
                    if any(v in desc[c] for c in g.successors(u) if c != v):
                        continue
                    pu = state.parents(u)
                    if max_indegree is not None and len(pu) + 1 > max_indegree:
                        continue
                    gain = local(u, pu | {v}) - local(u, pu)
                    yield Move(REVERSE, (u, v), drop + gain)
                elif not g.has_edge(v, u):
                    if (u, v) in constraints.forbidden or u in desc[v]:
                        continue
                    if max_indegree is not None and len(pv) + 1 > max_indegree:
                        continue
                    yield Move(ADD, (u, v), local(v, pv | {u}) - local(v, pv))
            except ComplexityError:
                continue


def hill_climb(data: RecordTable, constraints: EdgeConstraints | None = None, *,
               scorer: AicScorer | None = None, start: Dag | None = None,
               max_indegree: int | None = None, max_iter: int = 100_000,
               epsilon: float = 1e-9) -> Dag:
    """
    Steepest-ascent hill climbing over single edge additions, removals and reversals.

    Starts from `start` (or the empty graph) plus the fixed edges and stops when no
    legal move improves the score by more than `epsilon`. Ties between equally good
    moves go to the first one in (from, to) node-declaration order.
    """
    constraints = constraints or EdgeConstraints()
    scorer = scorer or AicScorer(data)
    nodes = tuple(data.labels)
    constraints.check_nodes(nodes)

    edges = set(start.edges) if start is not None else set()
    bad = sorted(edges & constraints.forbidden)
    if bad:
        raise ConstraintError(f"Start graph contains forbidden edges: {bad}")
    edges |= set(constraints.fixed)
    Dag(nodes, frozenset(edges))  # acyclicity check of the starting point

    state = _SearchState(nodes, edges)
    iterations = 0
    for iterations in range(1, max_iter + 1):
        best: Move | None = None
        for move in legal_moves(state, constraints, scorer, max_indegree):
            if best is None or move.delta > best.delta:
                best = move
        if best is None or best.delta <= epsilon:
            break
        state.apply(best)
    else:
        logger.warning("Hill climbing stopped at max_iter=%s before reaching a local optimum", max_iter)

    result = state.dag()
    logger.info("Hill climbing finished after %s iteration(s) with %s edge(s)", iterations, len(result))
    return result
