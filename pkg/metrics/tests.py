import math
import tempfile
from pathlib import Path

import numpy as np
from django.test import SimpleTestCase

from composition.households import ComposedTable, Households, Persons, composed_schema
from ipf.constraints import MarginalConstraint
from tabular.schema import AttributeSpec, Schema, SchemaError
from tabular.tables import DistributionVector, RecordTable

from .report import JSD_MAX, ComparisonEntry, DiversityEntry, MetricsReport
from .services import (
    DivergenceError,
    Population,
    UndefinedMetricError,
    association_check,
    entropy_diversity,
    household_diversity,
    jsd,
    kl,
    marginal_report,
    r_squared,
    sampling_zero_recovery,
    srmse,
)


def _dist(*shares) -> DistributionVector:
    return DistributionVector(("X",), {(i,): s for i, s in enumerate(shares) if s > 0})


def _random_dist(rng, n=100, zeros=10) -> np.ndarray:
    p = rng.random(n)
    p[rng.choice(n, zeros, replace=False)] = 0.0
    return p / p.sum()


def _vector(p) -> DistributionVector:
    return DistributionVector(("X",), {(i,): v for i, v in enumerate(p) if v > 0})


class MetricTests(SimpleTestCase):
    def test_srmse_known_values(self):
        self.assertEqual(srmse(_dist(0.5, 0.5), _dist(0.5, 0.5)), 0.0)
        self.assertAlmostEqual(srmse(_dist(0.6, 0.4), _dist(0.5, 0.5)), 0.2, delta=1e-12)
        self.assertAlmostEqual(srmse(_dist(0, 1), _dist(1, 0)), 2.0, delta=1e-12)

    def test_kl_known_values(self):
        self.assertEqual(kl(_dist(0.3, 0.7), _dist(0.3, 0.7)), 0.0)
        self.assertAlmostEqual(kl(_dist(1, 0), _dist(0.5, 0.5)), math.log(2), delta=1e-12)
        with self.assertRaises(DivergenceError):
            kl(_dist(0.5, 0.5), _dist(1, 0))

    def test_kl_is_never_negative(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            ref = rng.random(20) + 0.01
            self.assertGreaterEqual(kl(_vector(_random_dist(rng, 20, 3)), _vector(ref / ref.sum())), -1e-15)

    def test_jsd_known_values(self):
        self.assertEqual(jsd(_dist(0.2, 0.8), _dist(0.2, 0.8)), 0.0)
        self.assertAlmostEqual(jsd(_dist(1, 0), _dist(0, 1)), math.sqrt(math.log(2)), delta=1e-9)

    def test_jsd_symmetric_and_bounded(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            p, q = _vector(_random_dist(rng)), _vector(_random_dist(rng))
            self.assertAlmostEqual(jsd(p, q), jsd(q, p), delta=1e-12)
            self.assertLessEqual(jsd(p, q), JSD_MAX + 1e-12)
            self.assertGreaterEqual(jsd(p, q), 0.0)

    def test_r_squared_known_values(self):
        ref = _dist(0.1, 0.2, 0.3, 0.4)
        self.assertAlmostEqual(r_squared(ref, ref), 1.0, places=12)
        self.assertAlmostEqual(r_squared(_dist(0.25, 0.25, 0.25, 0.25), ref), 0.0, places=12)
        self.assertAlmostEqual(r_squared(_dist(0.15, 0.15, 0.35, 0.35), ref), 0.8, delta=1e-12)
        with self.assertRaises(UndefinedMetricError):
            r_squared(ref, _dist(0.25, 0.25, 0.25, 0.25))

    def test_empty_union_is_an_argument_error(self):
        empty = DistributionVector(("X",), {})
        with self.assertRaises(ValueError):
            srmse(empty, empty)

    def test_against_brute_force(self):
        rng = np.random.default_rng(2)
        for _ in range(100):
            p = _random_dist(rng)
            q = rng.random(100) + 1e-3
            q = q / q.sum()
            hat, ref = _vector(p), _vector(q)

            n = len(q)
            mean = sum(q) / n
            oracle_srmse = math.sqrt(sum((a - b) ** 2 for a, b in zip(p, q)) / n) / mean
            oracle_kl = sum(a * math.log(a / b) for a, b in zip(p, q) if a > 0)
            half = [(a + b) / 2 for a, b in zip(p, q)]
            oracle_js = 0.5 * sum(a * math.log(a / m) for a, m in zip(p, half) if a > 0) + 0.5 * sum(
                b * math.log(b / m) for b, m in zip(q, half) if b > 0
            )
            oracle_r2 = 1 - sum((a - b) ** 2 for a, b in zip(p, q)) / sum((b - mean) ** 2 for b in q)

            self.assertAlmostEqual(srmse(hat, ref), oracle_srmse, delta=1e-9)
            self.assertAlmostEqual(kl(hat, ref), oracle_kl, delta=1e-9)
            self.assertAlmostEqual(jsd(hat, ref), math.sqrt(oracle_js), delta=1e-9)
            self.assertAlmostEqual(r_squared(hat, ref), oracle_r2, delta=1e-9)


def _cat(label, n, level="person"):
    return AttributeSpec(label, level=level, levels=tuple(str(i) for i in range(n)))


AREA = _cat("AREA", 2, "household")
AGE = _cat("AGEP", 3)
SEX = _cat("SEX", 2)


class DiversityTests(SimpleTestCase):
    def _records(self, values):
        return RecordTable(Schema((AGE,)), [[v] for v in values])

    def test_single_group(self):
        self.assertEqual(entropy_diversity(self._records([1, 1, 1]), ["AGEP"]), 0.0)

    def test_uniform_groups(self):
        schema = Schema((AGE, SEX))
        records = RecordTable(schema, [[0, 0], [0, 1], [1, 0], [1, 1]])
        self.assertAlmostEqual(entropy_diversity(records, ["AGEP", "SEX"]), math.log(4), delta=1e-12)

    def test_row_order_does_not_matter(self):
        values = [0, 1, 1, 2, 2, 2, 0]
        self.assertAlmostEqual(
            entropy_diversity(self._records(values), ["AGEP"]),
            entropy_diversity(self._records(values[::-1]), ["AGEP"]),
            delta=1e-15,
        )

    def test_bounded_by_log_group_count(self):
        rng = np.random.default_rng(3)
        values = rng.integers(0, 3, 50)
        self.assertLessEqual(entropy_diversity(self._records(values), ["AGEP"]), math.log(3) + 1e-12)

    def test_empty_attribute_set(self):
        with self.assertRaises(ValueError):
            entropy_diversity(self._records([0]), [])

    def test_household_signature_ignores_member_order(self):
        pop = Population(
            Households(["a", "b"], RecordTable(Schema((AREA,)), [[0], [0]])),
            Persons(["a", "a", "b", "b"], RecordTable(Schema((AGE,)), [[0], [2], [2], [0]])),
        )
        entry = household_diversity(pop, ["AREA", "AGEP"])
        self.assertEqual(entry.group_count, 1)
        self.assertEqual(entry.entropy, 0.0)

    def test_sampling_zero_recovery(self):
        def pop(ages):
            ids = [f"h{i}" for i in range(len(ages))]
            return Population(
                Households(ids, RecordTable(Schema((AREA,)), [[0]] * len(ages))),
                Persons(ids, RecordTable(Schema((AGE,)), [[a] for a in ages])),
            )

        entry = sampling_zero_recovery(pop([0, 1, 2]), pop([0]), pop([0, 2]), ["AGEP"], level="person")
        self.assertEqual((entry.truth_only, entry.recovered), (2, 1))


HH = Schema((AREA,))
PP = Schema((AGE,))


def _composed(rows) -> ComposedTable:
    return ComposedTable(2, HH, PP, RecordTable(composed_schema(HH, PP, 2), rows))


class AssociationTests(SimpleTestCase):
    def test_identical_tables(self):
        table = _composed([[0, 2, 1], [0, 2, 1], [1, 1, 0], [1, 0, 0]])
        entry = association_check(table, table, ["AGEP"])
        self.assertEqual(entry.axes, ("AGEP_1", "AGEP_2"))
        self.assertAlmostEqual(entry.r_squared, 1.0, places=12)
        self.assertEqual(entry.jsd, 0.0)

    def test_correlated_reference_against_independent_synthetic(self):
        reference = _composed([[0, x, x] for x in range(3)] * 3)
        synthetic = _composed([[0, x, y] for x in range(3) for y in range(3)])
        self.assertGreater(association_check(synthetic, reference, ["AGEP"]).jsd, 0.0)

    def test_row_order_invariance(self):
        rows = [[0, 2, 1], [1, 0, 0], [0, 1, 1], [1, 2, 0]]
        reference = _composed([[0, 2, 2], [1, 1, 0], [0, 0, 0]])
        a = association_check(_composed(rows), reference, ["AGEP"])
        b = association_check(_composed(rows[::-1]), reference, ["AGEP"])
        self.assertEqual(a, b)

    def test_mismatched_sizes(self):
        one = ComposedTable(1, HH, PP, RecordTable(composed_schema(HH, PP, 1), [[0, 1]]))
        with self.assertRaises(ValueError):
            association_check(one, _composed([[0, 1, 1]]), ["AGEP"])


class MarginalReportTests(SimpleTestCase):
    schema = Schema((AREA, AGE))

    def _population(self):
        return Population(
            Households(["a", "b", "c"], RecordTable(HH, [[0], [1], [1]])),
            Persons(["a", "a", "b", "c", "c", "c"], RecordTable(PP, [[0], [2], [1], [1], [0], [2]])),
        )

    def test_census_consistent_shares_match(self):
        census = [MarginalConstraint(("AREA", "AGEP"), {(0, 0): 1, (0, 2): 1, (1, 1): 2, (1, 0): 1, (1, 2): 1}, "person")]
        frames = marginal_report(self._population(), census, [["AGEP"], ["AREA", "AGEP"]], self.schema)
        for frame in frames.values():
            np.testing.assert_allclose(frame["synthetic_share"], frame["census_share"], atol=1e-12)
            self.assertAlmostEqual(frame["synthetic_share"].sum(), 1.0, delta=1e-12)
            self.assertAlmostEqual(frame["census_share"].sum(), 1.0, delta=1e-12)
        self.assertEqual(list(frames["AGEP"]["category"]), ["AGEP=0", "AGEP=1", "AGEP=2"])

    def test_reference_population_and_household_grouping(self):
        frames = marginal_report(self._population(), self._population(), [["AREA"]], self.schema)
        np.testing.assert_allclose(frames["AREA"]["synthetic_share"], [1 / 3, 2 / 3])

    def test_uncovered_grouping_is_skipped(self):
        census = [MarginalConstraint(("AGEP",), {(0,): 2, (1,): 2, (2,): 2}, "person")]
        with self.assertLogs("metrics.services", "WARNING"):
            frames = marginal_report(self._population(), census, [["AREA"]], self.schema)
        self.assertEqual(frames, {})

    def test_unknown_grouping_label(self):
        with self.assertRaises(SchemaError):
            marginal_report(self._population(), self._population(), [["NOPE"]], self.schema)


class ReportTests(SimpleTestCase):
    def test_json_round_trip(self):
        report = MetricsReport(
            populations={"synthetic": {"households": 3, "persons": 6}},
            comparisons=[ComparisonEntry("AGEP", ("AGEP",), 0.1, 0.05, 0.9, 3)],
            diversity=[DiversityEntry(("AGEP",), 1.1, 3, "person", reference_entropy=1.0)],
        )
        with tempfile.TemporaryDirectory() as tmp:
            again = MetricsReport.load(report.save(Path(tmp) / "metrics.json"))
        self.assertEqual(again.to_json(), report.to_json())
        self.assertAlmostEqual(again.diversity[0].delta, 0.1, delta=1e-12)

    def test_entry_invariants(self):
        with self.assertRaises(ValueError):
            ComparisonEntry("x", ("X",), -0.1, 0.0, None, 1)
        with self.assertRaises(ValueError):
            ComparisonEntry("x", ("X",), 0.0, 1.0, None, 1)
