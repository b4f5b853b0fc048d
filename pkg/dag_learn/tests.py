import itertools
import math
from collections import Counter
from unittest import mock

import networkx as nx
import numpy as np
from django.test import SimpleTestCase

from tabular.schema import AttributeSpec, Schema
from tabular.tables import RecordTable

from .dag import ConstraintError, CyclicGraphError, Dag, EdgeConstraints, parse_edge, topological_order
from .discovery import (
    DiscoveryParams,
    ForestParams,
    discover_edges_ols,
    discover_edges_rf,
    rank_predictors_rf,
)
from .scoring import AicScorer, ComplexityError, aic_score, parameter_count
from .search import _SearchState, hill_climb
from .services import (
    DagMethod,
    ScoredDag,
    build_dag,
    cross_validate,
    cross_validation_scores,
    expand_member_edges,
    learn_dags,
    merge_dags,
    root_forbidden_edges,
    select_best,
)


def _table(columns: dict) -> RecordTable:
    """columns: label -> (cardinality, values)."""
    attrs = tuple(
        AttributeSpec(label, levels=tuple(str(i) for i in range(card)))
        for label, (card, _) in columns.items()
    )
    codes = np.column_stack([np.asarray(v, dtype=np.int64) for _, v in columns.values()])
    return RecordTable(Schema(attrs), codes)


def _grid(cards: dict, repeat: int) -> RecordTable:
    """Full factorial design repeated `repeat` times: every column exactly independent."""
    rows = np.asarray(list(itertools.product(*[range(c) for c in cards.values()])) * repeat)
    return _table({lb: (c, rows[:, j]) for j, (lb, c) in enumerate(cards.items())})


def _chain_table() -> RecordTable:
    """Exact A -> B -> C counts: B copies A 80% of the time, C copies B 80%, A and C independent given B."""
    rows = []
    for a in (0, 1):
        for b, n_ab in ((a, 2000), (1 - a, 500)):
            c_same = n_ab * 4 // 5
            rows += [(a, b, b)] * c_same + [(a, b, 1 - b)] * (n_ab - c_same)
    rows = np.asarray(rows)
    return _table({"A": (2, rows[:, 0]), "B": (2, rows[:, 1]), "C": (2, rows[:, 2])})


def _sampled_chain(seed: int, n: int = 5000, card: int = 4, copy: float = 0.8) -> RecordTable:
    """A -> B -> C over `card` levels: each child copies its parent with probability `copy`, else uniform."""
    rng = np.random.default_rng(seed)
    a = rng.integers(0, card, n)
    b = np.where(rng.random(n) < copy, a, rng.integers(0, card, n))
    c = np.where(rng.random(n) < copy, b, rng.integers(0, card, n))
    return _table({"A": (card, a), "B": (card, b), "C": (card, c)})


def _random_dependent(seed: int, n: int = 400, nodes=("A", "B", "C", "D", "E"), card: int = 3) -> RecordTable:
    rng = np.random.default_rng(seed)
    cols = {}
    prev = None
    for label in nodes:
        noise = rng.integers(0, card, n)
        if prev is None:
            values = noise
        else:
            keep = rng.random(n) < 0.6
            values = np.where(keep, prev, noise)
        cols[label] = (card, values)
        prev = values
    return _table(cols)


def _all_dags(nodes) -> list[Dag]:
    pairs = [(u, v) for u in nodes for v in nodes if u != v]
    out = []
    for mask in range(1 << len(pairs)):
        edges = frozenset(p for i, p in enumerate(pairs) if mask >> i & 1)
        try:
            out.append(Dag(tuple(nodes), edges))
        except CyclicGraphError:
            continue
    return out


def _oracle_aic(dag: Dag, data: RecordTable) -> float:
    """Explicit CPT enumeration with plain Python counting."""
    rows = [dict(zip(data.labels, r)) for r in data.rows()]
    cards = dict(zip(data.labels, data.schema.cardinalities))
    total = 0.0
    for v in dag.nodes:
        parents = dag.parents(v)
        joint = Counter((tuple(r[p] for p in parents), r[v]) for r in rows)
        marg = Counter(tuple(r[p] for p in parents) for r in rows)
        ll = sum(n * math.log(n / marg[c]) for (c, _), n in joint.items())
        k = (cards[v] - 1) * math.prod(cards[p] for p in parents)
        total += ll - k
    return total


def _legal_neighbours(dag: Dag, constraints: EdgeConstraints):
    nodes = dag.nodes
    for u in nodes:
        for v in nodes:
            if u == v:
                continue
            candidates = []
            if (u, v) in dag.edges:
                if (u, v) in constraints.fixed:
                    continue
                candidates.append(dag.edges - {(u, v)})
                if (v, u) not in constraints.forbidden:
                    candidates.append((dag.edges - {(u, v)}) | {(v, u)})
            elif (v, u) not in dag.edges and (u, v) not in constraints.forbidden:
                candidates.append(dag.edges | {(u, v)})
            for edges in candidates:
                try:
                    yield Dag(nodes, frozenset(edges))
                except CyclicGraphError:
                    continue


class DagTests(SimpleTestCase):
    def test_topological_order_cases(self):
        self.assertEqual(topological_order(Dag(("C", "A", "B"))), ["C", "A", "B"])
        self.assertEqual(topological_order(Dag(("A", "B", "C"), {("A", "B"), ("B", "C")})), ["A", "B", "C"])
        order = topological_order(Dag(("D", "C", "B", "A"), {("A", "B"), ("A", "C"), ("B", "D"), ("C", "D")}))
        self.assertEqual((order[0], order[-1]), ("A", "D"))

    def test_cycles_rejected(self):
        with self.assertRaises(CyclicGraphError) as ctx:
            Dag(("A", "B", "C"), {("A", "B"), ("B", "C"), ("C", "A")})
        self.assertIn("->", str(ctx.exception))
        with self.assertRaises(CyclicGraphError):
            Dag(("A",), {("A", "A")})
        with self.assertRaises(CyclicGraphError):
            Dag(("A", "B"), {("A", "B")}).add_edge("B", "A")

    def test_mutations_return_new_dags(self):
        dag = Dag(("A", "B"))
        grown = dag.add_edge("A", "B")
        self.assertEqual(len(dag), 0)
        self.assertEqual(grown.reverse_edge("A", "B").edges, frozenset({("B", "A")}))
        self.assertEqual(grown.remove_edge("A", "B").edges, frozenset())

    def test_dot_round_trip(self):
        dag = Dag(("AREA", "AGEP_1", "SEX_1"), {("AREA", "AGEP_1"), ("AGEP_1", "SEX_1")})
        again = Dag.from_dot(dag.to_dot("k1"))
        self.assertEqual(again.edges, dag.edges)
        self.assertEqual(set(again.nodes), set(dag.nodes))

    def test_parse_edge(self):
        self.assertEqual(parse_edge("AREA -> AGEP"), ("AREA", "AGEP"))
        self.assertEqual(parse_edge("AREA→AGEP"), ("AREA", "AGEP"))
        with self.assertRaises(ConstraintError):
            parse_edge("AREA AGEP")

    def test_constraints_validated(self):
        with self.assertRaises(ConstraintError):
            EdgeConstraints(fixed={("A", "B")}, forbidden={("A", "B")})
        with self.assertRaises(ConstraintError):
            EdgeConstraints(fixed={("A", "B"), ("B", "A")})
        with self.assertRaises(ConstraintError):
            EdgeConstraints(fixed={("A", "Z")}).check_nodes(["A", "B"])


class AicTests(SimpleTestCase):
    def test_single_binary_node(self):
        data = _table({"A": (2, [0, 1])})
        self.assertAlmostEqual(aic_score(Dag(("A",)), data), 2 * math.log(0.5) - 1, places=12)

    def test_matches_enumeration_oracle(self):
        dags = _all_dags(("A", "B", "C"))
        self.assertEqual(len(dags), 25)
        for trial in range(20):
            rng = np.random.default_rng(trial)
            data = _table({lb: (2, rng.integers(0, 2, 200)) for lb in ("A", "B", "C")})
            scorer = AicScorer(data)
            for dag in dags:
                self.assertAlmostEqual(scorer.score(dag), _oracle_aic(dag, data), delta=1e-9)

    def test_independent_parent_costs_exactly_one(self):
        data = _grid({"A": 2, "B": 2}, 25)
        empty = Dag(("A", "B"))
        linked = empty.add_edge("A", "B")
        scorer = AicScorer(data)
        self.assertAlmostEqual(scorer.log_likelihood(linked), scorer.log_likelihood(empty), places=9)
        self.assertAlmostEqual(scorer.score(empty) - scorer.score(linked), 1.0, places=9)

    def test_bounded_by_saturated_likelihood(self):
        rng = np.random.default_rng(3)
        data = _table({lb: (2, rng.integers(0, 2, 150)) for lb in ("A", "B", "C", "D")})
        counts = Counter(data.rows())
        saturated = sum(n * math.log(n / len(data)) for n in counts.values())
        scorer = AicScorer(data)
        for dag in _all_dags(("A", "B", "C", "D"))[::7]:
            self.assertLessEqual(scorer.score(dag), saturated + 1e-9)

    def test_adding_edges_is_monotone(self):
        rng = np.random.default_rng(5)
        data = _table({lb: (3, rng.integers(0, 3, 300)) for lb in ("A", "B", "C")})
        scorer = AicScorer(data)
        cards = {"A": 3, "B": 3, "C": 3}
        for dag in _all_dags(("A", "B", "C")):
            for u, v in itertools.permutations(dag.nodes, 2):
                if (u, v) in dag.edges or (v, u) in dag.edges:
                    continue
                try:
                    bigger = dag.add_edge(u, v)
                except CyclicGraphError:
                    continue
                self.assertGreaterEqual(scorer.log_likelihood(bigger), scorer.log_likelihood(dag) - 1e-9)
                self.assertGreater(parameter_count(bigger, cards), parameter_count(dag, cards))

    def test_parent_configuration_cap(self):
        data = _grid({"A": 2, "B": 2, "C": 2}, 2)
        scorer = AicScorer(data, parent_config_cap=3)
        with self.assertRaises(ComplexityError):
            scorer.local_score("C", {"A", "B"})
        self.assertTrue(math.isfinite(scorer.local_score("C", {"A"})))


class HillClimbTests(SimpleTestCase):
    def test_independent_columns_give_empty_dag(self):
        data = _grid({"A": 2, "B": 2}, 1250)
        self.assertEqual(len(hill_climb(data, EdgeConstraints())), 0)

    def test_near_copy_gives_one_edge(self):
        rng = np.random.default_rng(11)
        a = rng.integers(0, 2, 5000)
        b = np.where(rng.random(5000) < 0.95, a, 1 - a)
        dag = hill_climb(_table({"A": (2, a), "B": (2, b)}), EdgeConstraints())
        self.assertEqual(len(dag), 1)
        self.assertEqual({frozenset(e) for e in dag.edges}, {frozenset({"A", "B"})})

    def test_fixed_edge_kept_on_independent_data(self):
        data = _grid({"A": 2, "B": 2}, 1250)
        dag = hill_climb(data, EdgeConstraints(fixed={("A", "B")}))
        self.assertEqual(dag.edges, frozenset({("A", "B")}))

    def test_forbidden_edge_never_added(self):
        rng = np.random.default_rng(2)
        a = rng.integers(0, 2, 2000)
        data = _table({"A": (2, a), "B": (2, a.copy())})
        dag = hill_climb(data, EdgeConstraints(forbidden={("A", "B")}))
        self.assertEqual(dag.edges, frozenset({("B", "A")}))
        self.assertEqual(len(hill_climb(data, EdgeConstraints(forbidden={("A", "B"), ("B", "A")}))), 0)

    def test_local_optimality(self):
        cases = [
            EdgeConstraints(),
            EdgeConstraints(fixed={("E", "A")}),
            EdgeConstraints(fixed={("A", "C")}, forbidden={("B", "C"), ("D", "E")}),
        ]
        for seed, constraints in enumerate(cases):
            data = _random_dependent(seed)
            scorer = AicScorer(data)
            dag = hill_climb(data, constraints)
            self.assertTrue(constraints.fixed <= dag.edges)
            self.assertFalse(constraints.forbidden & dag.edges)
            best = scorer.score(dag)
            for neighbour in _legal_neighbours(dag, constraints):
                self.assertLessEqual(scorer.score(neighbour), best + 1e-6)

    def test_max_indegree(self):
        data = _random_dependent(4, n=600)
        dag = hill_climb(data, EdgeConstraints(), max_indegree=1)
        self.assertLessEqual(max(len(dag.parents(v)) for v in dag.nodes), 1)

    def test_chain_skeleton_recovered(self):
        recovered = 0
        for seed in range(20):
            dag = hill_climb(_sampled_chain(seed), EdgeConstraints())
            recovered += {frozenset(e) for e in dag.edges} == {frozenset({"A", "B"}), frozenset({"B", "C"})}
        self.assertGreaterEqual(recovered, 19)

    def test_exact_chain_counts(self):
        dag = hill_climb(_chain_table(), EdgeConstraints())
        self.assertEqual({frozenset(e) for e in dag.edges}, {frozenset({"A", "B"}), frozenset({"B", "C"})})


class DiscoveryTests(SimpleTestCase):
    def test_ols_copy_ranked_first(self):
        rng = np.random.default_rng(0)
        x = rng.integers(0, 3, 600)
        data = _table({
            "X": (3, x),
            "N1": (2, rng.integers(0, 2, 600)),
            "N2": (4, rng.integers(0, 4, 600)),
            "T": (3, x.copy()),
        })
        self.assertEqual(discover_edges_ols(data, ["T"], top_m=1), frozenset({("X", "T")}))

    def test_ols_exact_null_gives_no_edges(self):
        data = _grid({"T": 3, "P1": 3, "P2": 2}, 278)
        self.assertEqual(discover_edges_ols(data, ["T"], top_m=2, alpha=0.01), frozenset())

    def test_ols_top_m_cardinality(self):
        data = _random_dependent(7, n=800, nodes=("A", "B", "C", "D", "E", "F"))
        edges = discover_edges_ols(data, None, top_m=2, alpha=1.0)
        per_target = Counter(v for _, v in edges)
        self.assertTrue(per_target)
        self.assertLessEqual(max(per_target.values()), 2)

    def test_ols_collinear_columns_dropped_with_warning(self):
        rng = np.random.default_rng(1)
        x = rng.integers(0, 3, 300)
        data = _table({"X": (3, x), "Y": (3, x.copy()), "T": (2, rng.integers(0, 2, 300))})
        with self.assertLogs("dag_learn.discovery", level="WARNING"):
            discover_edges_ols(data, ["T"], top_m=2)

    def test_rf_copy_has_highest_importance(self):
        rng = np.random.default_rng(0)
        x = rng.integers(0, 3, 1000)
        data = _table({
            "X": (3, x),
            "N1": (3, rng.integers(0, 3, 1000)),
            "N2": (3, rng.integers(0, 3, 1000)),
            "T": (3, x.copy()),
        })
        ranked = rank_predictors_rf(data, "T", ForestParams(seed=3))
        self.assertEqual(max(ranked, key=lambda r: r.statistic).predictor, "X")
        self.assertIn(("X", "T"), discover_edges_rf(data, ["T"], top_m=2, params=ForestParams(seed=3)))

    def test_rf_noise_gives_no_edges(self):
        rng = np.random.default_rng(9)
        data = _table({lb: (2, rng.integers(0, 2, 2000)) for lb in ("T", "P1", "P2", "P3", "P4")})
        self.assertEqual(discover_edges_rf(data, ["T"], top_m=2, params=ForestParams(seed=1)), frozenset())

    def test_rf_deterministic_under_seed(self):
        data = _random_dependent(3, n=500)
        params = ForestParams(seed=42)
        self.assertEqual(
            discover_edges_rf(data, None, top_m=2, params=params),
            discover_edges_rf(data, None, top_m=2, params=params),
        )

    def test_rf_single_level_target_skipped(self):
        rng = np.random.default_rng(0)
        data = _table({"T": (3, np.zeros(100, dtype=int)), "X": (2, rng.integers(0, 2, 100))})
        with self.assertLogs("dag_learn.discovery", level="WARNING"):
            self.assertEqual(discover_edges_rf(data, ["T"], top_m=1), frozenset())


class MergeTests(SimpleTestCase):
    nodes = ("A", "B", "C")

    def test_additions_already_present(self):
        primary = Dag(self.nodes, {("A", "B"), ("B", "C")})
        self.assertEqual(merge_dags(primary, {("A", "B")}).edges, primary.edges)

    def test_protected_edge_survives(self):
        primary = Dag(self.nodes, {("A", "B")})
        merged = merge_dags(primary, {("B", "A")}, {("A", "B")})
        self.assertEqual(merged.edges, frozenset({("A", "B")}))

    def test_three_cycle_repaired_by_score(self):
        data = _chain_table()
        primary = Dag(self.nodes, {("A", "B"), ("B", "C")})
        merged = merge_dags(primary, {("C", "A")}, scorer=AicScorer(data))
        self.assertEqual(len(merged), 2)
        # C -> A carries the least information about A once the chain is in place.
        self.assertEqual(merged.edges, frozenset({("A", "B"), ("B", "C")}))

    def test_tie_break_is_lexicographic(self):
        primary = Dag(self.nodes, {("B", "C"), ("C", "A")})
        merged = merge_dags(primary, {("A", "B")})
        self.assertEqual(merged.edges, frozenset({("B", "C"), ("C", "A")}))

    def test_protected_cycle_is_infeasible(self):
        primary = Dag(self.nodes, {("A", "B")})
        with self.assertRaises(ConstraintError):
            merge_dags(primary, {("B", "A")}, {("A", "B"), ("B", "A")})


class BuildDagTests(SimpleTestCase):
    def test_sl_on_independent_data_is_empty(self):
        data = _grid({"A": 2, "B": 3, "C": 2}, 200)
        self.assertEqual(len(build_dag(DagMethod.SL, data)), 0)

    def test_focused_edges_in_every_method_but_sl(self):
        moves = []

        def checked_apply(state, move):
            applied(state, move)
            self.assertTrue(nx.is_directed_acyclic_graph(state.graph), move)
            moves.append(move)

        applied = _SearchState.apply
        nodes = ("A", "B", "C", "D", "E")
        with mock.patch.object(_SearchState, "apply", checked_apply):
            for seed in range(100):
                rng = np.random.default_rng(1000 + seed)
                conditional = nodes[int(rng.integers(0, len(nodes)))]
                u, v = rng.choice([n for n in nodes if n != conditional], size=2, replace=False)
                data = _random_dependent(seed, n=300, nodes=nodes)
                constraints = EdgeConstraints(
                    fixed={(str(u), str(v))}, forbidden=root_forbidden_edges(data.labels, {conditional}),
                )
                params = DiscoveryParams(forest=ForestParams(trees=10, seed=seed))
                for method in DagMethod:
                    dag = build_dag(method, data, constraints, params)
                    self.assertTrue(nx.is_directed_acyclic_graph(nx.DiGraph(list(dag.edges))), (seed, method))
                    self.assertFalse(constraints.forbidden & dag.edges, (seed, method))
                    if method is not DagMethod.SL:
                        self.assertIn((str(u), str(v)), dag.edges, (seed, method))
        self.assertTrue(moves)

    def test_parse_and_slug(self):
        self.assertIs(DagMethod.parse("feb+sl"), DagMethod.FEB_PLUS_SL)
        self.assertIs(DagMethod.parse("FEB_PLUS_SL"), DagMethod.FEB_PLUS_SL)
        self.assertEqual(DagMethod.FEB_PLUS_SL.slug, "feb_sl")
        with self.assertRaises(ValueError):
            DagMethod.parse("BIC")

    def test_expand_member_edges(self):
        labels = ("AREA", "AGEP_1", "SEX_1", "AGEP_2", "SEX_2")
        edges = expand_member_edges([("AREA", "AGEP"), ("AGEP", "SEX")], labels, ("AGEP", "SEX"), 2)
        self.assertEqual(edges, frozenset({
            ("AREA", "AGEP_1"), ("AREA", "AGEP_2"), ("AGEP_1", "SEX_1"), ("AGEP_2", "SEX_2"),
        }))
        with self.assertRaises(ConstraintError):
            expand_member_edges([("AREA", "VEH")], labels, ("AGEP", "SEX"), 2)

    def test_root_forbidden_edges(self):
        forbidden = root_forbidden_edges(("AREA", "AGEP_1", "SEX_1"), {"AREA", "AGEP_1"})
        self.assertEqual(forbidden, frozenset({("SEX_1", "AREA"), ("SEX_1", "AGEP_1")}))


class CrossValidationTests(SimpleTestCase):
    def test_constant_data_has_zero_std(self):
        data = _table({"A": (2, [1] * 10), "B": (3, [2] * 10)})
        _, std = cross_validate(Dag(("A", "B"), {("A", "B")}), data, folds=5)
        self.assertAlmostEqual(std, 0.0, places=12)

    def test_mean_is_mean_of_folds(self):
        data = _random_dependent(1, n=203, nodes=("A", "B", "C"))
        dag = Dag(("A", "B", "C"), {("A", "B")})
        scores = cross_validation_scores(dag, data, folds=5, seed=9)
        mean, std = cross_validate(dag, data, folds=5, seed=9)
        self.assertEqual(len(scores), 5)
        self.assertAlmostEqual(mean, math.fsum(scores) / 5, delta=1e-12)
        self.assertAlmostEqual(std, float(np.std(scores)), delta=1e-12)

    def test_true_edge_beats_empty(self):
        rng = np.random.default_rng(0)
        a = rng.integers(0, 2, 5000)
        b = np.where(rng.random(5000) < 0.8, a, 1 - a)
        data = _table({"A": (2, a), "B": (2, b)})
        linked, _ = cross_validate(Dag(("A", "B"), {("A", "B")}), data)
        empty, _ = cross_validate(Dag(("A", "B")), data)
        self.assertGreater(linked, empty)

    def test_too_few_rows(self):
        with self.assertRaises(ValueError):
            cross_validate(Dag(("A",)), _table({"A": (2, [0, 1, 1])}), folds=5)

    def test_learn_dags_scores_every_method(self):
        data = _random_dependent(2, n=300, nodes=("A", "B", "C"))
        scored = learn_dags(data, EdgeConstraints(fixed={("A", "C")}), folds=3)
        self.assertEqual([s.method for s in scored], list(DagMethod))
        self.assertTrue(all(s.std_aic >= 0 for s in scored))


class SelectBestTests(SimpleTestCase):
    def _scored(self, mean, n_edges, method=DagMethod.SL):
        nodes = ("A", "B", "C", "D", "E", "F")
        chain = {(nodes[i], nodes[i + 1]) for i in range(n_edges)}
        return ScoredDag(Dag(nodes, chain), mean, 0.0, method)

    def test_single(self):
        only = self._scored(-3.0, 1)
        self.assertIs(select_best([only]), only)

    def test_highest_mean(self):
        picks = [self._scored(-10, 1), self._scored(-8, 2), self._scored(-9, 3)]
        self.assertEqual(select_best(picks).mean_aic, -8)

    def test_ties_prefer_fewer_edges_then_method_order(self):
        self.assertEqual(select_best([self._scored(-5, 5), self._scored(-5, 3)]).edge_count, 3)
        tied = [self._scored(-5, 2, DagMethod.RLAFE), self._scored(-5, 2, DagMethod.HASL)]
        self.assertIs(select_best(tied).method, DagMethod.HASL)

    def test_empty(self):
        with self.assertRaises(ValueError):
            select_best([])
