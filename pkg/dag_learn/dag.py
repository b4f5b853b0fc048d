# dag_learn/dag.py
from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import networkx as nx

from core.exceptions import PopSynthError


Edge = tuple[str, str]


class CyclicGraphError(PopSynthError):
    pass


class ConstraintError(PopSynthError):
    pass


def _cycle_text(cycle: Sequence[Edge]) -> str:
    nodes = [u for u, _ in cycle] + [cycle[0][0]]
    return " -> ".join(nodes)


@dataclass(frozen=True)
class Dag:
    """
    Attribute-labelled DAG. Instances are immutable; every mutation returns a new
    Dag and is rejected with CyclicGraphError if it would close a cycle.
    """

    nodes: tuple[str, ...]
    edges: frozenset[Edge] = field(default_factory=frozenset)

    def __post_init__(self):
        nodes = tuple(self.nodes)
        if len(set(nodes)) != len(nodes):
            raise ValueError(f"Duplicate DAG nodes in {nodes}")
        edges = frozenset((str(u), str(v)) for u, v in self.edges)
        known = set(nodes)
        for u, v in edges:
            if u == v:
                raise CyclicGraphError(f"Self-loop on {u}")
            if u not in known or v not in known:
                raise ValueError(f"Edge {u} -> {v} references an unknown node")
        object.__setattr__(self, "nodes", nodes)
        object.__setattr__(self, "edges", edges)

        cycle = find_cycle(self.graph())
        if cycle:
            raise CyclicGraphError(f"Graph has a directed cycle: {_cycle_text(cycle)}")

    # -------------------------------------------------------------------------
    # Queries
    # -------------------------------------------------------------------------
    def graph(self) -> nx.DiGraph:
        g = nx.DiGraph()
        g.add_nodes_from(self.nodes)
        g.add_edges_from(sorted(self.edges))
        return g

    def parents(self, node: str) -> tuple[str, ...]:
        """Parents of `node` in node-declaration order."""
        ps = {u for u, v in self.edges if v == node}
        return tuple(n for n in self.nodes if n in ps)

    def children(self, node: str) -> tuple[str, ...]:
        cs = {v for u, v in self.edges if u == node}
        return tuple(n for n in self.nodes if n in cs)

    def parent_map(self) -> dict[str, tuple[str, ...]]:
        return {n: self.parents(n) for n in self.nodes}

    def sorted_edges(self) -> list[Edge]:
        pos = {n: i for i, n in enumerate(self.nodes)}
        return sorted(self.edges, key=lambda e: (pos[e[0]], pos[e[1]]))

    def __len__(self) -> int:
        return len(self.edges)

    # -------------------------------------------------------------------------
    # Mutations (each returns a new Dag)
    # -------------------------------------------------------------------------
    def add_edge(self, u: str, v: str) -> "Dag":
        return Dag(self.nodes, self.edges | {(u, v)})

    def remove_edge(self, u: str, v: str) -> "Dag":
        return Dag(self.nodes, self.edges - {(u, v)})

    def reverse_edge(self, u: str, v: str) -> "Dag":
        if (u, v) not in self.edges:
            raise ValueError(f"No edge {u} -> {v} to reverse")
        return Dag(self.nodes, (self.edges - {(u, v)}) | {(v, u)})

    def with_edges(self, edges: Iterable[Edge]) -> "Dag":
        return Dag(self.nodes, frozenset(edges))

    # -------------------------------------------------------------------------
    # DOT
    # -------------------------------------------------------------------------
    def to_dot(self, name: str = "dag") -> str:
        lines = [f'digraph "{name}" {{']
        for n in self.nodes:
            lines.append(f'  "{n}";')
        for u, v in self.sorted_edges():
            lines.append(f'  "{u}" -> "{v}";')
        lines.append("}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_dot(cls, text: str) -> "Dag":
        nodes: list[str] = []
        edges: list[Edge] = []
        for raw in text.splitlines():
            line = raw.strip().rstrip(";").strip()
            if not line or line.startswith(("digraph", "}", "//", "#")):
                continue
            m = _DOT_EDGE.match(line)
            if m:
                u, v = _unquote(m.group(1)), _unquote(m.group(2))
                for n in (u, v):
                    if n not in nodes:
                        nodes.append(n)
                edges.append((u, v))
                continue
            m = _DOT_NODE.match(line)
            if m:
                n = _unquote(m.group(1))
                if n not in nodes:
                    nodes.append(n)
        return cls(tuple(nodes), frozenset(edges))


_DOT_EDGE = re.compile(r'^("[^"]+"|[\w.]+)\s*->\s*("[^"]+"|[\w.]+)(\s*\[.*\])?$')
_DOT_NODE = re.compile(r'^("[^"]+"|[\w.]+)(\s*\[.*\])?$')


def _unquote(s: str) -> str:
    return s[1:-1] if s.startswith('"') and s.endswith('"') else s


def find_cycle(graph: nx.DiGraph) -> list[Edge]:
    try:
        return [(e[0], e[1]) for e in nx.find_cycle(graph, orientation="original")]
    except nx.NetworkXNoCycle:
        return []


def topological_order(dag: Dag) -> list[str]:
    """
    Parents before children; among unconstrained nodes the declaration order wins,
    so an edgeless DAG comes back in declaration order.
    """
    g = dag.graph()
    cycle = find_cycle(g)
    if cycle:
        raise CyclicGraphError(f"Graph has a directed cycle: {_cycle_text(cycle)}")
    pos = {n: i for i, n in enumerate(dag.nodes)}
    return list(nx.lexicographical_topological_sort(g, key=pos.__getitem__))


def parse_edge(text: str) -> Edge:
    """'FROM -> TO' (also accepts '→')."""
    parts = re.split(r"\s*(?:->|→)\s*", str(text).strip())
    if len(parts) != 2 or not all(parts):
        raise ConstraintError(f"Edge must look like 'FROM -> TO', got {text!r}")
    return parts[0], parts[1]


@dataclass(frozen=True)
class EdgeConstraints:
    fixed: frozenset[Edge] = field(default_factory=frozenset)
    forbidden: frozenset[Edge] = field(default_factory=frozenset)

    def __post_init__(self):
        fixed = frozenset(tuple(e) for e in self.fixed)
        forbidden = frozenset(tuple(e) for e in self.forbidden)
        clash = fixed & forbidden
        if clash:
            raise ConstraintError(f"Edges both fixed and forbidden: {sorted(clash)}")
        g = nx.DiGraph(list(fixed))
        cycle = find_cycle(g)
        if cycle:
            raise ConstraintError(f"Fixed edges form a cycle: {_cycle_text(cycle)}")
        object.__setattr__(self, "fixed", fixed)
        object.__setattr__(self, "forbidden", forbidden)

    def check_nodes(self, nodes: Iterable[str]) -> None:
        known = set(nodes)
        unknown = sorted({n for e in self.fixed | self.forbidden for n in e} - known)
        if unknown:
            raise ConstraintError(f"Constraint edges reference unknown columns: {unknown}")

    def with_fixed(self, edges: Iterable[Edge]) -> "EdgeConstraints":
        return EdgeConstraints(self.fixed | frozenset(edges), self.forbidden)

    def without_fixed(self) -> "EdgeConstraints":
        return EdgeConstraints(frozenset(), self.forbidden)
