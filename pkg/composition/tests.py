from collections import Counter

import numpy as np
from django.test import SimpleTestCase

from tabular.schema import AttributeSpec, Schema, SchemaError
from tabular.tables import RecordTable

from .households import (
    ComposedTable,
    Households,
    InfeasibleError,
    Persons,
    ReferentialIntegrityError,
    composed_schema,
    composed_width,
    parse_composed_labels,
    size_codes,
)
from .services import (
    MemberOrdering,
    canonicalize_members,
    compose_households,
    decompose,
    replicate_large,
    split_by_size,
)


def _cat(label, n, level="person"):
    return AttributeSpec(label, level=level, levels=tuple(str(i) for i in range(1, n + 1)))


NON_NYC_HOUSEHOLD = Schema((_cat("PUMA", 90, "household"), _cat("HINCP", 9, "household"), _cat("VEH", 4, "household")))
NON_NYC_PERSON = Schema((
    _cat("AGEP", 7), _cat("ENG", 5),
    AttributeSpec("JWMNP", level="person", bin_edges=(0, 15, 30, 45, 60, 90, 140)),
    _cat("JWTRNS", 13), _cat("SCH", 3), _cat("SEX", 2), _cat("DIS", 2), _cat("NAICSP", 20), _cat("RACWHT", 2),
))
NYC_HOUSEHOLD = Schema((_cat("CT", 2313, "household"), _cat("HINCP", 9, "household"), _cat("VEH", 4, "household")))
NYC_PERSON = Schema((
    _cat("AGEP", 7), _cat("ENG", 5), _cat("SEX", 2), _cat("DIS", 2), _cat("NAICSP", 2), _cat("RACWHT", 2),
))

HH = Schema((_cat("AREA", 2, "household"), _cat("VEH", 3, "household")))
PP = Schema((_cat("AGEP", 5), _cat("SEX", 2)))


def _population():
    households = Households(
        ["a", "b", "c", "d"],
        RecordTable(HH, [[0, 1], [1, 0], [0, 2], [1, 1]]),
    )
    # a: 2 members, b: 1, c: 2, d: 6
    persons = Persons(
        ["a", "a", "b", "c", "c"] + ["d"] * 6,
        RecordTable(PP, [[1, 0], [4, 1], [2, 0], [0, 1], [3, 0]] + [[i % 5, i % 2] for i in range(6)]),
    )
    return households, persons


class WidthTests(SimpleTestCase):
    def test_non_nyc_widths(self):
        widths = [len(composed_schema(NON_NYC_HOUSEHOLD, NON_NYC_PERSON, k)) for k in range(1, 6)]
        self.assertEqual(widths, [12, 21, 30, 39, 48])

    def test_nyc_widths(self):
        widths = [len(composed_schema(NYC_HOUSEHOLD, NYC_PERSON, k)) for k in range(1, 6)]
        self.assertEqual(widths, [9, 15, 21, 27, 33])

    def test_width_law(self):
        for n_h, n_p, k in [(3, 9, 2), (3, 6, 5), (1, 0, 1), (4, 2, 7)]:
            self.assertEqual(composed_width(n_h, n_p, k), n_h + k * n_p)

    def test_member_labels_are_suffixed(self):
        labels = composed_schema(NYC_HOUSEHOLD, NYC_PERSON, 2).labels
        self.assertIn("AGEP_1", labels)
        self.assertIn("AGEP_2", labels)
        self.assertEqual(labels[:3], ("CT", "HINCP", "VEH"))


class ComposeTests(SimpleTestCase):
    def test_two_person_rows(self):
        households, persons = _population()
        composed = compose_households(households, persons, 2)
        self.assertEqual(composed.width, 2 + 2 * 2)
        self.assertEqual(list(composed.household_ids), ["a", "c"])
        self.assertEqual(composed.records.labels, ("AREA", "VEH", "AGEP_1", "SEX_1", "AGEP_2", "SEX_2"))

    def test_oldest_member_first(self):
        households, persons = _population()
        composed = compose_households(households, persons, 2)
        # household a: ages (1, 4) -> member _1 is the age-4 record
        self.assertEqual(composed.records.rows()[0], (0, 1, 4, 1, 1, 0))

    def test_ties_fall_back_to_other_attributes_then_input_order(self):
        households = Households(["x"], RecordTable(HH, [[0, 0]]))
        persons = Persons(["x", "x"], RecordTable(PP, [[2, 1], [2, 0]]))
        row = compose_households(households, persons, 2).records.rows()[0]
        self.assertEqual(row[2:], (2, 0, 2, 1))

    def test_custom_ordering(self):
        households, persons = _population()
        composed = compose_households(households, persons, 2, MemberOrdering(primary="AGEP", descending=False))
        self.assertEqual(composed.records.rows()[0][2], 1)

    def test_deterministic(self):
        households, persons = _population()
        a = compose_households(households, persons, 2)
        b = compose_households(households, persons, 2)
        self.assertTrue(np.array_equal(a.records.codes, b.records.codes))

    def test_household_only_schema(self):
        empty_person = Schema(())
        households = Households(["x", "y"], RecordTable(HH, [[0, 0], [1, 2]]))
        persons = Persons(["x", "y"], RecordTable(empty_person, np.zeros((2, 0), dtype=int)))
        composed = compose_households(households, persons, 1)
        self.assertEqual(composed.width, len(HH))

    def test_dangling_person(self):
        households, persons = _population()
        bad = Persons(list(persons.household_ids[:-1]) + ["zz"], persons.records)
        with self.assertRaises(ReferentialIntegrityError):
            compose_households(households, bad, 2)

    def test_zero_member_household_is_skipped(self):
        households = Households(["x", "y"], RecordTable(HH, [[0, 0], [1, 2]]))
        persons = Persons(["x"], RecordTable(PP, [[1, 1]]))
        with self.assertLogs("composition.services", level="WARNING"):
            composed = compose_households(households, persons, 1)
        self.assertEqual(list(composed.household_ids), ["x"])


class SplitTests(SimpleTestCase):
    def test_partition_and_overflow(self):
        households, persons = _population()
        split = split_by_size(households, persons, 5)
        self.assertEqual(split.sizes, [1, 2])
        self.assertEqual(list(split.overflow[0].ids), ["d"])
        self.assertEqual(len(split.overflow[1]), 6)

    def test_person_conservation(self):
        households, persons = _population()
        split = split_by_size(households, persons, 5)
        composed_persons = sum(k * len(compose_households(*split.buckets[k], k)) for k in split.sizes)
        self.assertEqual(composed_persons + len(split.overflow[1]), len(persons))

    def test_threshold_one(self):
        households, persons = _population()
        split = split_by_size(households, persons, 1)
        self.assertEqual(split.sizes, [1])
        self.assertEqual(sorted(split.overflow[0].ids), ["a", "c", "d"])

    def test_single_bucket(self):
        households = Households(["x", "y"], RecordTable(HH, [[0, 0], [1, 2]]))
        persons = Persons(["x", "x", "y", "y"], RecordTable(PP, [[1, 1], [0, 0], [2, 1], [3, 0]]))
        split = split_by_size(households, persons, 5)
        self.assertEqual(split.sizes, [2])
        self.assertEqual(len(split.overflow[0]), 0)

    def test_size_codes(self):
        self.assertEqual(size_codes(np.array([1, 5, 6, 9]), 5).tolist(), [0, 4, 5, 5])


class ReplicateTests(SimpleTestCase):
    def test_copies_get_distinct_ids(self):
        households, persons = _population()
        overflow = split_by_size(households, persons, 5).overflow
        out_h, out_p = replicate_large(overflow, {1: 3}, stratum="AREA", rng=np.random.default_rng(0))
        self.assertEqual(len(out_h), 3)
        self.assertEqual(len(set(out_h.ids)), 3)
        self.assertEqual(len(out_p), 18)
        self.assertEqual(Counter(out_p.household_ids), {hid: 6 for hid in out_h.ids})
        # member rows copied intact
        original = sorted(overflow[1].records.rows())
        for hid in out_h.ids:
            rows = [r for r, h in zip(out_p.records.rows(), out_p.household_ids) if h == hid]
            self.assertEqual(sorted(rows), original)

    def test_zero_target(self):
        households, persons = _population()
        overflow = split_by_size(households, persons, 5).overflow
        out_h, out_p = replicate_large(overflow, {1: 0}, stratum="AREA", rng=np.random.default_rng(0))
        self.assertEqual((len(out_h), len(out_p)), (0, 0))

    def test_empty_stratum_is_infeasible(self):
        households, persons = _population()
        overflow = split_by_size(households, persons, 5).overflow
        with self.assertRaises(InfeasibleError) as ctx:
            replicate_large(overflow, {0: 2}, stratum="AREA", rng=np.random.default_rng(0))
        self.assertIn("AREA", str(ctx.exception))

    def test_empty_stratum_pools_when_enabled(self):
        households, persons = _population()
        overflow = split_by_size(households, persons, 5).overflow
        with self.assertLogs("composition.services", "WARNING"):
            out_h, out_p = replicate_large(overflow, {0: 2}, stratum="AREA", rng=np.random.default_rng(0),
                                           pool_strata=True)
        self.assertEqual(out_h.records.column("AREA").tolist(), [0, 0])
        self.assertEqual(len(out_p), 12)


class DecomposeTests(SimpleTestCase):
    def test_round_trip(self):
        households, persons = _population()
        composed = compose_households(households, persons, 2)
        out_h, out_p = decompose(composed)
        self.assertEqual(Counter(out_h.records.rows()), Counter([(0, 1), (0, 2)]))
        kept = [r for r, h in zip(persons.records.rows(), persons.household_ids) if h in {"a", "c"}]
        self.assertEqual(Counter(out_p.records.rows()), Counter(kept))

    def test_counting(self):
        schema = composed_schema(HH, PP, 3)
        composed = ComposedTable(3, HH, PP, RecordTable(schema, [[0, 1, 1, 0, 2, 1, 3, 0]]))
        out_h, out_p = decompose(composed)
        self.assertEqual((len(out_h), len(out_p)), (1, 3))
        self.assertEqual(len(set(out_p.household_ids)), 1)

    def test_empty(self):
        composed = ComposedTable(2, HH, PP, RecordTable.empty(composed_schema(HH, PP, 2)))
        out_h, out_p = decompose(composed)
        self.assertEqual((len(out_h), len(out_p)), (0, 0))

    def test_malformed_suffix(self):
        with self.assertRaises(SchemaError):
            parse_composed_labels(["AREA", "VEH", "AGEP_1", "SEX_1", "AGEP_3", "SEX_3"], HH, PP)
        with self.assertRaises(SchemaError):
            parse_composed_labels(["AREA", "VEH", "AGEP_1", "SEX"], HH, PP)
        self.assertEqual(parse_composed_labels(composed_schema(HH, PP, 4).labels, HH, PP), 4)

    def test_households_without_person_attributes(self):
        empty = Schema(())
        schema = composed_schema(HH, empty, 1)
        self.assertEqual(schema.labels, HH.labels)
        with self.assertRaises(SchemaError):
            parse_composed_labels(schema.labels, HH, empty)
        composed = ComposedTable.from_records(RecordTable(schema, np.array([[0, 1], [1, 2]])), HH, empty, size=1)
        out_h, out_p = decompose(composed)
        self.assertEqual((len(out_h), len(out_p)), (2, 2))
        np.testing.assert_array_equal(out_h.records.codes, [[0, 1], [1, 2]])

    def test_declared_size_must_match_the_header(self):
        labels = composed_schema(HH, PP, 2).labels
        self.assertEqual(parse_composed_labels(labels, HH, PP, size=2), 2)
        with self.assertRaises(SchemaError):
            parse_composed_labels(labels, HH, PP, size=3)

    def test_canonicalize_restores_order(self):
        schema = composed_schema(HH, PP, 2)
        shuffled = ComposedTable(2, HH, PP, RecordTable(schema, [[0, 0, 1, 0, 4, 1]]))
        self.assertEqual(canonicalize_members(shuffled).records.rows()[0], (0, 0, 4, 1, 1, 0))
