import tempfile
from pathlib import Path

import numpy as np
from django.test import SimpleTestCase

from .io import read_records, write_records
from .schema import AttributeSpec, LevelError, RangeError, Schema, SchemaError
from .services import bin_continuous, bin_values, normalize, project, project_counts, tabulate
from .tables import ContingencyTable, DistributionVector, EmptyTableError, RecordTable


COMMUTE = AttributeSpec("JWMNP", level="person", bin_edges=(0, 30, 60, 140))


def _binary_schema(*labels):
    return Schema(tuple(AttributeSpec(lb, level="person", levels=("0", "1")) for lb in labels))


class AttributeSpecTests(SimpleTestCase):
    def test_levels_must_be_unique(self):
        with self.assertRaises(SchemaError):
            AttributeSpec("SEX", levels=("1", "1"))

    def test_bin_edges_strictly_increasing(self):
        with self.assertRaises(SchemaError):
            AttributeSpec("JWMNP", bin_edges=(0, 30, 30, 140))

    def test_continuous_range_and_categories(self):
        self.assertEqual(COMMUTE.min, 0)
        self.assertEqual(COMMUTE.max, 140)
        self.assertEqual(COMMUTE.cardinality, 3)
        self.assertEqual(COMMUTE.categories, ("[0,30)", "[30,60)", "[60,140]"))

    def test_duplicate_labels_rejected(self):
        with self.assertRaises(SchemaError):
            Schema((AttributeSpec("A", levels=("x",)), AttributeSpec("A", levels=("y",))))


class BinningTests(SimpleTestCase):
    def test_lower_boundary(self):
        self.assertEqual(bin_continuous(0, COMMUTE), 0)

    def test_closed_upper_boundary(self):
        self.assertEqual(bin_continuous(140, COMMUTE), 2)

    def test_interior_value(self):
        self.assertEqual(bin_continuous(45, COMMUTE), 1)
        self.assertEqual(bin_continuous(30, COMMUTE), 1)

    def test_out_of_range_names_attribute(self):
        with self.assertRaises(RangeError) as ctx:
            bin_continuous(141, COMMUTE)
        self.assertIn("JWMNP", str(ctx.exception))
        self.assertIn("141", str(ctx.exception))

    def test_binning_is_monotone_and_total(self):
        values = np.linspace(0, 140, 2001)
        bins = bin_values(values, COMMUTE)
        self.assertTrue(np.all(np.diff(bins) >= 0))
        self.assertEqual(set(bins.tolist()), {0, 1, 2})
        for v, b in zip(values[::97], bins[::97]):
            self.assertEqual(bin_continuous(v, COMMUTE), b)


class TabulateTests(SimpleTestCase):
    def test_empty_rows(self):
        table = tabulate(RecordTable.empty(_binary_schema("A")), ["A"])
        self.assertEqual(len(table), 0)
        self.assertEqual(table.total, 0)

    def test_hand_count(self):
        records = RecordTable.from_rows(_binary_schema("A"), [(0,), (0,), (1,)])
        self.assertEqual(tabulate(records, ["A"]).cells, {(0,): 2.0, (1,): 1.0})

    def test_conservation_over_all_axes(self):
        rng = np.random.default_rng(3)
        records = RecordTable(_binary_schema("A", "B", "C"), rng.integers(0, 2, size=(57, 3)))
        self.assertEqual(tabulate(records, ["A", "B", "C"]).total, 57)

    def test_unknown_axis(self):
        with self.assertRaises(SchemaError):
            tabulate(RecordTable.empty(_binary_schema("A")), ["Z"])

    def test_out_of_range_codes_rejected(self):
        with self.assertRaises(LevelError):
            RecordTable(_binary_schema("A"), [[2]])

    def test_projection_commutes_with_tabulation(self):
        rng = np.random.default_rng(11)
        records = RecordTable(_binary_schema("A", "B", "C"), rng.integers(0, 2, size=(200, 3)))
        full = tabulate(records, ["A", "B", "C"])
        direct = tabulate(records, ["C", "A"])
        self.assertEqual(project_counts(full, ["C", "A"]).cells, direct.cells)

        via_dist = project(normalize(full), ["C", "A"])
        direct_dist = normalize(direct)
        for key, v in direct_dist.cells.items():
            self.assertAlmostEqual(via_dist.cells[key], v, delta=1e-12)


class NormalizeProjectTests(SimpleTestCase):
    def test_symmetric(self):
        dist = normalize(ContingencyTable(("A",), {(0,): 2, (1,): 2}))
        self.assertEqual(dist.cells, {(0,): 0.5, (1,): 0.5})

    def test_hand_division(self):
        dist = normalize(ContingencyTable(("A",), {(0,): 3, (1,): 1}))
        self.assertEqual(dist.cells, {(0,): 0.75, (1,): 0.25})

    def test_single_cell(self):
        self.assertEqual(normalize(ContingencyTable(("A",), {(0,): 7})).cells, {(0,): 1.0})

    def test_empty_table_error(self):
        with self.assertRaises(EmptyTableError):
            normalize(ContingencyTable(("A",), {}))

    def test_project_identity(self):
        dist = DistributionVector(("A", "B"), {(0, 0): 0.1, (0, 1): 0.2, (1, 0): 0.3, (1, 1): 0.4})
        self.assertEqual(project(dist, ["A", "B"]).cells, dist.cells)

    def test_project_uniform(self):
        dist = DistributionVector(("A", "B"), {(0, 0): 0.25, (0, 1): 0.25, (1, 0): 0.25, (1, 1): 0.25})
        self.assertEqual(project(dist, ["A"]).cells, {(0,): 0.5, (1,): 0.5})

    def test_project_hand_sum(self):
        dist = DistributionVector(("A", "B"), {(0, 0): 0.1, (0, 1): 0.2, (1, 0): 0.3, (1, 1): 0.4})
        out = project(dist, ["A"])
        self.assertAlmostEqual(out.cells[(0,)], 0.3, places=12)
        self.assertAlmostEqual(out.cells[(1,)], 0.7, places=12)

    def test_empty_subset_rejected(self):
        dist = DistributionVector(("A",), {(0,): 1.0})
        with self.assertRaises(ValueError):
            project(dist, [])

    def test_proportions_must_sum_to_one(self):
        with self.assertRaises(ValueError):
            DistributionVector(("A",), {(0,): 0.5})

    def test_integral_counts(self):
        ContingencyTable(("A",), {(0,): 3.0, (1,): 4 + 1e-12}).assert_integral()
        with self.assertRaises(ValueError):
            ContingencyTable(("A",), {(0,): 3.0, (1,): 0.5}).assert_integral()


class CsvIngestionTests(SimpleTestCase):
    def test_levels_and_decimals_are_encoded(self):
        schema = Schema((
            AttributeSpec("SEX", levels=("1", "2")),
            COMMUTE,
        ))
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "persons.csv"
            path.write_text("SERIALNO,SEX,JWMNP\nh1,2,45\nh1,1,140\nh2,1,0\n", encoding="utf-8")
            ids, records = read_records(path, schema, id_columns=["SERIALNO"])
            self.assertEqual(records.rows(), [(1, 1), (0, 2), (0, 0)])
            self.assertEqual(list(ids["SERIALNO"]), ["h1", "h1", "h2"])

            # Binned output reads back to the same indices.
            out = write_records(Path(tmp) / "again.csv", records, ids=ids)
            _, again = read_records(out, schema)
            self.assertEqual(again.rows(), records.rows())

    def test_unknown_level(self):
        schema = Schema((AttributeSpec("SEX", levels=("1", "2")),))
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "p.csv"
            path.write_text("SEX\n3\n", encoding="utf-8")
            with self.assertRaises(LevelError):
                read_records(path, schema)
