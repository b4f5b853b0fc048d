import math
import tempfile
from pathlib import Path

import numpy as np
from django.test import SimpleTestCase

from composition.households import ComposedTable, Households, Persons, composed_schema
from tabular.schema import AttributeSpec, Schema
from tabular.tables import ContingencyTable, RecordTable

from .constraints import InfeasibleTargetError, MarginalConstraint, WeightedSample, read_marginal
from .services import (
    build_conditional_population,
    household_targets,
    integerize,
    ipf_fit,
    rake_household_weights,
)


def _cat(label, n, level="person"):
    return AttributeSpec(label, level=level, levels=tuple(str(i) for i in range(n)))


def _grid(cells) -> ContingencyTable:
    cells = np.asarray(cells, dtype=float)
    return ContingencyTable(("R", "C"), {(i, j): cells[i, j] for i in range(cells.shape[0]) for j in range(cells.shape[1])})


def _dense(table: ContingencyTable, shape) -> np.ndarray:
    out = np.zeros(shape)
    for (i, j), v in table.cells.items():
        out[i, j] = v
    return out


def _rows(*targets):
    return MarginalConstraint(("R",), {(i,): t for i, t in enumerate(targets)})


def _cols(*targets):
    return MarginalConstraint(("C",), {(j,): t for j, t in enumerate(targets)})


class IpfTests(SimpleTestCase):
    def test_matching_seed_is_unchanged(self):
        seed = _grid([[1, 2], [3, 4]])
        result = ipf_fit(seed, [_rows(3, 7), _cols(4, 6)])
        self.assertEqual(result.sweeps, 0)
        self.assertTrue(result.converged)
        self.assertEqual(result.table.cells, seed.cells)

    def test_two_by_two_hand_case(self):
        result = ipf_fit(_grid([[1, 1], [1, 1]]), [_rows(3, 1), _cols(2, 2)])
        np.testing.assert_allclose(_dense(result.table, (2, 2)), [[1.5, 1.5], [0.5, 0.5]], atol=1e-9)
        self.assertLessEqual(result.sweeps, 2)
        self.assertTrue(result.converged)

    def test_odds_ratio_preserved(self):
        result = ipf_fit(_grid([[2, 1], [1, 2]]), [_rows(10, 10), _cols(10, 10)])
        m = _dense(result.table, (2, 2))
        self.assertAlmostEqual(m[0, 0] * m[1, 1] / (m[0, 1] * m[1, 0]), 4.0, delta=1e-6)

    def test_odds_ratio_preserved_on_random_seeds(self):
        rng = np.random.default_rng(11)
        for _ in range(50):
            seed = rng.uniform(0.5, 5.0, (2, 2))
            a, b = rng.uniform(1, 20, 2)
            c = rng.uniform(0.1, 0.9) * (a + b)
            result = ipf_fit(_grid(seed), [_rows(a, b), _cols(c, a + b - c)])
            m = _dense(result.table, (2, 2))
            before = seed[0, 0] * seed[1, 1] / (seed[0, 1] * seed[1, 0])
            self.assertAlmostEqual(m[0, 0] * m[1, 1] / (m[0, 1] * m[1, 0]) / before, 1.0, delta=1e-6)

    def test_zero_cells_stay_zero(self):
        seed = ContingencyTable(("R", "C"), {(0, 1): 1, (0, 2): 2, (1, 0): 1, (1, 1): 0, (1, 2): 3, (2, 0): 2, (2, 1): 2})
        result = ipf_fit(seed, [_rows(5, 5, 5), _cols(4, 6, 5)])
        self.assertEqual(result.table.get((1, 1)), 0.0)
        self.assertNotIn((0, 0), result.table.cells)
        self.assertNotIn((2, 2), result.table.cells)

    def test_last_constraint_matched_after_each_sweep(self):
        rng = np.random.default_rng(3)
        seed = _grid(rng.uniform(0.1, 3.0, (3, 4)))
        cols = _cols(5, 1, 2, 8)
        result = ipf_fit(seed, [_rows(4, 4, 8), cols], max_iter=1)
        m = _dense(result.table, (3, 4)).sum(axis=0)
        for j, t in enumerate((5, 1, 2, 8)):
            self.assertAlmostEqual(m[j], t, delta=1e-12 * t)

    def test_infeasible_target(self):
        seed = _grid([[1, 1], [0, 0]])
        with self.assertRaises(InfeasibleTargetError):
            ipf_fit(seed, [_rows(1, 1)])
        with self.assertLogs("ipf.services", "WARNING"):
            result = ipf_fit(seed, [_rows(1, 1)], skip_infeasible=True)
        self.assertTrue(result.converged)
        np.testing.assert_allclose(_dense(result.table, (2, 2)), [[0.5, 0.5], [0, 0]])

    def test_non_convergence_is_reported(self):
        with self.assertLogs("ipf.services", "WARNING") as logs:
            result = ipf_fit(_grid([[1, 1], [1, 1]]), [_rows(3, 1), _cols(1, 1)], max_iter=5)
        self.assertFalse(result.converged)
        self.assertEqual(result.sweeps, 5)
        self.assertIn("did not converge", logs.output[0])

    def test_divergence_to_solution_never_increases(self):
        rng = np.random.default_rng(8)
        seed = _grid(rng.uniform(0.2, 4.0, (3, 3)))
        constraints = [_rows(6, 3, 9), _cols(2, 7, 9)]
        solution = _dense(ipf_fit(seed, constraints, tol=1e-13).table, (3, 3))

        def divergence(q):
            return float(np.sum(solution * np.log(solution / q) - solution + q))

        values = [divergence(_dense(ipf_fit(seed, constraints, tol=0.0, max_iter=t).table, (3, 3))) for t in range(1, 8)]
        for a, b in zip(values, values[1:]):
            self.assertLessEqual(b, a + 1e-9)


AREA = _cat("AREA", 2, "household")
AGE = _cat("AGEP", 2)


def _sample(areas, members) -> WeightedSample:
    owner = [h for h, ages in enumerate(members) for _ in ages]
    ages = [a for m in members for a in m]
    return WeightedSample(
        RecordTable(Schema((AREA,)), [[a] for a in areas]),
        RecordTable(Schema((AGE,)), [[a] for a in ages]),
        owner,
        np.ones(len(areas)),
    )


class RakeTests(SimpleTestCase):
    def test_single_household_constraint_in_one_pass(self):
        sample = _sample([0, 0, 1, 1, 1], [[0]] * 5)
        result = rake_household_weights(sample, [MarginalConstraint(("AREA",), {(0,): 4, (1,): 3})])
        np.testing.assert_allclose(result.weights, [2, 2, 1, 1, 1])
        self.assertEqual(result.sweeps, 1)
        self.assertTrue(result.converged)

    def test_orthogonal_constraints_on_balanced_sample(self):
        schema = Schema((_cat("A", 2, "household"), _cat("B", 2, "household")))
        sample = WeightedSample(
            RecordTable(schema, [[0, 0], [0, 1], [1, 0], [1, 1]]),
            RecordTable(Schema((AGE,)), [[0]] * 4),
            [0, 1, 2, 3],
            [1.0, 1.0, 1.0, 1.0],
        )
        result = rake_household_weights(sample, [
            MarginalConstraint(("A",), {(0,): 10, (1,): 10}),
            MarginalConstraint(("B",), {(0,): 10, (1,): 10}),
        ])
        np.testing.assert_allclose(result.weights, [5, 5, 5, 5])

    def test_person_constraint_on_identical_households(self):
        sample = _sample([0, 0, 0], [[0, 1]] * 3)
        result = rake_household_weights(sample, [MarginalConstraint(("AGEP",), {(0,): 6, (1,): 6}, "person")])
        np.testing.assert_allclose(result.weights, [2, 2, 2])
        self.assertTrue(result.converged)

    def test_person_factor_is_geometric_mean_of_members(self):
        sample = _sample([0, 1], [[0, 0], [1]])
        result = rake_household_weights(
            sample, [MarginalConstraint(("AGEP",), {(0,): 4, (1,): 3}, "person")], max_iter=1,
        )
        np.testing.assert_allclose(result.weights, [2, 3])

    def test_person_constraint_may_use_household_axes(self):
        sample = _sample([0, 1], [[0, 1], [0]])
        constraint = MarginalConstraint(("AREA", "AGEP"), {(0, 0): 2, (0, 1): 2, (1, 0): 5}, "person")
        result = rake_household_weights(sample, [constraint])
        np.testing.assert_allclose(result.weights, [2, 5])

    def test_infeasible_household_target(self):
        sample = _sample([0, 0], [[0], [1]])
        with self.assertRaises(InfeasibleTargetError):
            rake_household_weights(sample, [MarginalConstraint(("AREA",), {(0,): 2, (1,): 3})])


class IntegerizeTests(SimpleTestCase):
    def test_known_values(self):
        self.assertEqual(integerize([1, 1], 4).tolist(), [2, 2])
        self.assertEqual(integerize([1, 1, 1], 4).tolist(), [2, 1, 1])
        self.assertEqual(integerize([3, 0.5], 0).tolist(), [0, 0])

    def test_total_is_exact_and_counts_stay_near_quota(self):
        rng = np.random.default_rng(21)
        for _ in range(200):
            w = rng.exponential(1.0, rng.integers(1, 40))
            total = int(rng.integers(0, 500))
            counts = integerize(w, total)
            self.assertEqual(int(counts.sum()), total)
            quota = w / w.sum() * total
            self.assertTrue((counts >= np.floor(quota) - 1e-9).all())
            self.assertTrue((counts <= np.ceil(quota) + 1e-9).all())

    def test_stochastic_mode_is_exact_and_seeded(self):
        w = np.random.default_rng(4).exponential(1.0, 30)
        a = integerize(w, 101, rng=np.random.default_rng(5))
        b = integerize(w, 101, rng=np.random.default_rng(5))
        self.assertEqual(int(a.sum()), 101)
        np.testing.assert_array_equal(a, b)

    def test_zero_weight_with_positive_total(self):
        with self.assertRaises(ValueError):
            integerize([0, 0], 3)


HH = Schema((_cat("AREA", 2, "household"), _cat("VEH", 2, "household")))
PP = Schema((_cat("AGEP", 3), _cat("RACWHT", 2)))


def _composed(rows) -> ComposedTable:
    return ComposedTable(2, HH, PP, RecordTable(composed_schema(HH, PP, 2), rows))


ROWS = [
    [0, 0, 2, 1, 1, 0],
    [0, 1, 1, 0, 0, 0],
    [1, 0, 2, 0, 2, 1],
    [1, 1, 0, 1, 0, 1],
]


class ConditionalPopulationTests(SimpleTestCase):
    def test_identity_when_target_is_sample_size(self):
        composed = _composed(ROWS)
        pop = build_conditional_population(composed, [], len(ROWS), ("AREA", "AGEP", "RACWHT"))
        labels = ["AREA", "AGEP_1", "AGEP_2", "RACWHT_1", "RACWHT_2"]
        self.assertEqual(list(pop.labels), labels)
        np.testing.assert_array_equal(pop.records.codes, composed.records.select(labels).codes)
        self.assertEqual(pop.size, 2)

    def test_per_area_counts_match_targets(self):
        composed = _composed(ROWS)
        pop = build_conditional_population(
            composed, [MarginalConstraint(("VEH",), {(0,): 1, (1,): 3})], {0: 5, 1: 7}, ("AREA", "AGEP"),
            stratum="AREA",
        )
        self.assertEqual(len(pop), 12)
        self.assertEqual(np.bincount(pop.records.column("AREA")).tolist(), [5, 7])

    def test_empty_stratum(self):
        composed = _composed(ROWS[:2])
        with self.assertRaises(InfeasibleTargetError):
            build_conditional_population(composed, [], {0: 2, 1: 3}, ("AREA", "AGEP"), stratum="AREA")
        with self.assertLogs("ipf.services", "WARNING"):
            pop = build_conditional_population(
                composed, [], {0: 2, 1: 3}, ("AREA", "AGEP"), stratum="AREA", pool_strata=True,
            )
        self.assertEqual(np.bincount(pop.records.column("AREA")).tolist(), [2, 3])

    def test_precomputed_weights(self):
        pop = build_conditional_population(_composed(ROWS), [], 4, ("AREA",), weights=[0, 0, 1, 1])
        self.assertEqual(pop.records.column("AREA").tolist(), [1, 1, 1, 1])

    def test_household_targets_by_size(self):
        size = AttributeSpec("NP", level="household", levels=("1", "2", "3+"))
        constraint = MarginalConstraint(("AREA", "NP"), {(0, 0): 4, (0, 1): 2, (1, 1): 3, (1, 2): 1})
        self.assertEqual(
            household_targets(constraint, stratum="AREA", size_label=size.label),
            {1: {0: 4}, 2: {0: 2, 1: 3}, 3: {1: 1}},
        )

    def test_household_targets_must_be_whole(self):
        constraint = MarginalConstraint(("AREA", "NP"), {(0, 0): 4.5, (1, 1): 3})
        with self.assertRaises(ValueError):
            household_targets(constraint, stratum="AREA", size_label="NP")
        summed = MarginalConstraint(("AREA", "NP", "VEH"), {(0, 0, 0): 1.5, (0, 0, 1): 2.5, (1, 1, 0): 3})
        self.assertEqual(household_targets(summed, stratum="AREA", size_label="NP"), {1: {0: 4}, 2: {1: 3}})


class ConstraintTests(SimpleTestCase):
    def test_targets_must_be_valid(self):
        with self.assertRaises(ValueError):
            MarginalConstraint(("AREA",), {(0,): -1, (1,): 2})
        with self.assertRaises(ValueError):
            MarginalConstraint(("AREA",), {(0,): 0})
        with self.assertRaises(ValueError):
            MarginalConstraint(("AREA",), {(0,): math.inf})

    def test_read_marginal_infers_level(self):
        schema = Schema((AREA, AGE))
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "area_age.csv"
            path.write_text("AREA,AGEP,target\n0,0,3\n0,1,4\n1,1,5\n", encoding="utf-8")
            constraint = read_marginal(path, schema)
        self.assertEqual(constraint.level, "person")
        self.assertEqual(constraint.name, "area_age")
        self.assertEqual(constraint.targets, {(0, 0): 3.0, (0, 1): 4.0, (1, 1): 5.0})
        self.assertEqual(constraint.total, 12.0)

    def test_derived_size_attribute(self):
        households = Households(["a", "b", "c"], RecordTable(Schema((AREA,)), [[0], [1], [1]]))
        persons = Persons(["a", "b", "b", "c", "c", "c"], RecordTable(Schema((AGE,)), [[0]] * 6))
        sample = WeightedSample.from_households(households, persons, size_label="NP", threshold=2)
        self.assertEqual(sample.households.schema.get("NP").levels, ("1", "2", "3+"))
        self.assertEqual(sample.households.column("NP").tolist(), [0, 1, 2])
        self.assertEqual(sample.owner.tolist(), [0, 1, 1, 2, 2, 2])
