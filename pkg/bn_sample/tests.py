import itertools
import math
import tempfile
from pathlib import Path

import numpy as np
from django.test import SimpleTestCase

from dag_learn.dag import Dag
from tabular.schema import AttributeSpec, LevelError, Schema
from tabular.tables import RecordTable

from .network import BayesNet, Cpt, ModelFormatError, fit_cpts, log_likelihood
from .sampling import (
    BayesNetBackend,
    ConditionalPopulation,
    GenerativeBackend,
    StructureError,
    row_uniforms,
    sample_conditional,
    sample_joint,
)


def _attr(label, n):
    return AttributeSpec(label, levels=tuple(str(i) for i in range(n)))


def _table(schema: Schema, columns) -> RecordTable:
    return RecordTable(schema, np.column_stack([np.asarray(c, dtype=np.int64) for c in columns]))


AREA_X = Schema((_attr("AREA", 2), _attr("X", 2)))


def _manual_net(p_x1_given_area=(0.7, 0.2)) -> BayesNet:
    dag = Dag(("AREA", "X"), {("AREA", "X")})
    cpts = {
        "AREA": Cpt("AREA", (), 2, (), {(): np.array([0.5, 0.5])}),
        "X": Cpt("X", ("AREA",), 2, (2,), {
            (a,): np.array([1 - p, p]) for a, p in enumerate(p_x1_given_area)
        }),
    }
    return BayesNet(AREA_X, dag, cpts, 1.0)


def _conditional(area_codes) -> ConditionalPopulation:
    schema = Schema((_attr("AREA", 2),))
    return ConditionalPopulation(_table(schema, [area_codes]))


class FitTests(SimpleTestCase):
    def test_laplace_root(self):
        schema = Schema((_attr("A", 2),))
        net = fit_cpts(Dag(("A",)), _table(schema, [[0, 0, 0, 1]]), alpha=1)
        np.testing.assert_allclose(net.cpts["A"].distribution(), [4 / 6, 2 / 6], atol=1e-12)

    def test_small_alpha_gives_empirical_frequencies(self):
        schema = Schema((_attr("P", 2), _attr("C", 3)))
        data = _table(schema, [[0, 0, 0, 1, 1], [0, 1, 1, 2, 2]])
        net = fit_cpts(Dag(("P", "C"), {("P", "C")}), data, alpha=1e-9)
        np.testing.assert_allclose(net.cpts["C"].distribution((0,)), [1 / 3, 2 / 3, 0], atol=1e-6)
        np.testing.assert_allclose(net.cpts["C"].distribution((1,)), [0, 0, 1], atol=1e-6)

    def test_unseen_configuration_is_uniform(self):
        schema = Schema((_attr("P", 2), _attr("C", 4)))
        data = _table(schema, [[0, 0, 0], [1, 2, 3]])
        cpt = fit_cpts(Dag(("P", "C"), {("P", "C")}), data).cpts["C"]
        np.testing.assert_allclose(cpt.distribution((1,)), [0.25] * 4)
        np.testing.assert_allclose(cpt.probabilities(np.array([[1], [0]]))[0], [0.25] * 4)

    def test_rows_are_distributions(self):
        rng = np.random.default_rng(0)
        schema = Schema((_attr("A", 3), _attr("B", 2), _attr("C", 4)))
        data = _table(schema, [rng.integers(0, 3, 80), rng.integers(0, 2, 80), rng.integers(0, 4, 80)])
        net = fit_cpts(Dag(("A", "B", "C"), {("A", "C"), ("B", "C")}), data, alpha=0.5)
        for cpt in net.cpts.values():
            for vec in cpt.table.values():
                self.assertAlmostEqual(math.fsum(vec), 1.0, delta=1e-9)
                self.assertTrue((vec > 0).all())

    def test_alpha_must_be_positive(self):
        schema = Schema((_attr("A", 2),))
        with self.assertRaises(ValueError):
            fit_cpts(Dag(("A",)), _table(schema, [[0, 1]]), alpha=0)

    def test_json_round_trip_preserves_likelihood(self):
        rng = np.random.default_rng(4)
        schema = Schema((_attr("A", 3), _attr("B", 2)))
        data = _table(schema, [rng.integers(0, 3, 50), rng.integers(0, 2, 50)])
        net = fit_cpts(Dag(("A", "B"), {("A", "B")}), data)
        with tempfile.TemporaryDirectory() as tmp:
            again = BayesNet.load(net.save(Path(tmp) / "model_2.json"))
        self.assertEqual(again.dag.edges, net.dag.edges)
        self.assertEqual(log_likelihood(again, data), log_likelihood(net, data))

    def test_unknown_model_version(self):
        net = _manual_net()
        doc = net.to_dict()
        doc["version"] = 99
        with self.assertRaises(ModelFormatError):
            BayesNet.from_dict(doc)


class LikelihoodTests(SimpleTestCase):
    def test_uniform_root_single_row(self):
        schema = Schema((_attr("A", 2),))
        net = fit_cpts(Dag(("A",)), _table(schema, [[0, 1]]))
        self.assertAlmostEqual(log_likelihood(net, _table(schema, [[0]])), math.log(0.5), places=12)

    def test_additive_over_concatenation(self):
        rng = np.random.default_rng(1)
        schema = Schema((_attr("A", 2), _attr("B", 3)))
        a = _table(schema, [rng.integers(0, 2, 30), rng.integers(0, 3, 30)])
        b = _table(schema, [rng.integers(0, 2, 17), rng.integers(0, 3, 17)])
        net = fit_cpts(Dag(("A", "B"), {("B", "A")}), a)
        both = RecordTable.concat([a, b])
        self.assertAlmostEqual(log_likelihood(net, both), log_likelihood(net, a) + log_likelihood(net, b), delta=1e-9)

    def test_matches_joint_enumeration(self):
        rng = np.random.default_rng(2)
        schema = Schema((_attr("A", 2), _attr("B", 2), _attr("C", 2)))
        data = _table(schema, [rng.integers(0, 2, 20) for _ in range(3)])
        dag = Dag(("A", "B", "C"), {("A", "B"), ("A", "C"), ("B", "C")})
        net = fit_cpts(dag, data, alpha=0.7)

        def joint(a, b, c):
            return (
                net.cpts["A"].distribution(())[a]
                * net.cpts["B"].distribution((a,))[b]
                * net.cpts["C"].distribution((a, b))[c]
            )

        self.assertAlmostEqual(
            math.fsum(joint(a, b, c) for a, b, c in itertools.product((0, 1), repeat=3)), 1.0, delta=1e-12
        )
        oracle = math.fsum(math.log(joint(*row)) for row in data.rows())
        self.assertAlmostEqual(log_likelihood(net, data), oracle, delta=1e-9)
        self.assertLessEqual(log_likelihood(net, data), 0.0)


class SamplingTests(SimpleTestCase):
    def test_degenerate_cpts_are_deterministic(self):
        net = _manual_net((1.0, 0.0))
        out = sample_conditional(net, _conditional([0, 1, 0, 1, 1]), seed=123)
        self.assertEqual(out.column("X").tolist(), [1, 0, 1, 0, 0])

    def test_conditional_cells_pass_through(self):
        areas = np.random.default_rng(0).integers(0, 2, 500)
        out = sample_conditional(_manual_net(), _conditional(areas), seed=5)
        np.testing.assert_array_equal(out.column("AREA"), areas)
        self.assertEqual(out.labels, ("AREA", "X"))

    def test_frequencies_within_binomial_bound(self):
        n = 100_000
        net = _manual_net((0.7, 0.2))
        for area, p in ((0, 0.7), (1, 0.2)):
            out = sample_conditional(net, _conditional(np.full(n, area)), seed=2024 + area)
            freq = out.column("X").mean()
            self.assertLessEqual(abs(freq - p), 3 * math.sqrt(p * (1 - p) / n))

    def test_reproducible_and_chunk_independent(self):
        areas = np.random.default_rng(1).integers(0, 2, 1000)
        net = _manual_net()
        a = sample_conditional(net, _conditional(areas), seed=77)
        b = sample_conditional(net, _conditional(areas), seed=77, chunk_rows=13)
        np.testing.assert_array_equal(a.codes, b.codes)
        c = sample_conditional(net, _conditional(areas), seed=78)
        self.assertFalse(np.array_equal(a.codes, c.codes))

    def test_row_streams_are_addressable(self):
        whole = row_uniforms(9, 0, 50, 6)
        np.testing.assert_array_equal(row_uniforms(9, 20, 30, 6), whole[20:])

    def test_non_root_conditional_rejected(self):
        dag = Dag(("AREA", "X"), {("X", "AREA")})
        cpts = {
            "X": Cpt("X", (), 2, (), {}),
            "AREA": Cpt("AREA", ("X",), 2, (2,), {}),
        }
        net = BayesNet(AREA_X, dag, cpts, 1.0)
        with self.assertRaises(StructureError):
            sample_conditional(net, _conditional([0, 1]), seed=0)

    def test_levels_matched_by_name(self):
        reordered = Schema((AttributeSpec("AREA", levels=("1", "0", "9")),))
        out = sample_conditional(_manual_net(), ConditionalPopulation(_table(reordered, [[0, 1]])), seed=0)
        self.assertEqual(out.column("AREA").tolist(), [1, 0])
        with self.assertRaises(LevelError):
            sample_conditional(_manual_net(), ConditionalPopulation(_table(reordered, [[2]])), seed=0)

    def test_target_must_match_rows(self):
        with self.assertRaises(ValueError):
            ConditionalPopulation(_table(Schema((_attr("AREA", 2),)), [[0, 1]]), target=3)

    def test_backend_protocol(self):
        backend = BayesNetBackend(_manual_net())
        self.assertIsInstance(backend, GenerativeBackend)
        self.assertEqual(len(backend.sample_conditional(_conditional([0, 1, 1]), seed=1)), 3)


class JointSamplingTests(SimpleTestCase):
    def test_frequencies_follow_the_cpts(self):
        n = 60_000
        out = sample_joint(_manual_net((0.7, 0.2)), n, seed=31)
        area, x = out.column("AREA"), out.column("X")
        self.assertLessEqual(abs(area.mean() - 0.5), 4 * math.sqrt(0.25 / n))
        for a, p in ((0, 0.7), (1, 0.2)):
            rows = x[area == a]
            self.assertLessEqual(abs(rows.mean() - p), 4 * math.sqrt(p * (1 - p) / rows.size))

    def test_reproducible_and_chunk_independent(self):
        net = _manual_net()
        a = sample_joint(net, 1000, seed=4)
        np.testing.assert_array_equal(a.codes, sample_joint(net, 1000, seed=4, chunk_rows=7).codes)
        self.assertFalse(np.array_equal(a.codes, sample_joint(net, 1000, seed=5).codes))
        self.assertEqual(a.labels, ("AREA", "X"))

    def test_degenerate_child_follows_its_parent(self):
        out = sample_joint(_manual_net((1.0, 0.0)), 300, seed=12)
        np.testing.assert_array_equal(out.column("X"), 1 - out.column("AREA"))

    def test_zero_and_negative_counts(self):
        self.assertEqual(len(sample_joint(_manual_net(), 0, seed=0)), 0)
        with self.assertRaises(ValueError):
            sample_joint(_manual_net(), -1, seed=0)
