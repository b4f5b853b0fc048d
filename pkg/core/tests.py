import tempfile
from pathlib import Path

from django.test import SimpleTestCase

from .exceptions import PopSynthError
from .seeds import derive_seed, file_digest, stage_rng


class DeriveSeedTests(SimpleTestCase):
    def test_deterministic(self):
        self.assertEqual(derive_seed(42, "cv", 3), derive_seed(42, "cv", 3))
        self.assertEqual(stage_rng(42, "generate", 2).integers(0, 1 << 30, 5).tolist(),
                         stage_rng(42, "generate", 2).integers(0, 1 << 30, 5).tolist())

    def test_stages_and_sizes_are_independent(self):
        seeds = {derive_seed(42, stage, k) for stage in ("cv", "generate", "integerize") for k in (1, 2, 3)}
        self.assertEqual(len(seeds), 9)
        self.assertNotEqual(derive_seed(42, "replicate"), derive_seed(42, "replicate", 0))
        self.assertNotEqual(derive_seed(42, "cv", 1), derive_seed(43, "cv", 1))

    def test_fits_in_64_bits(self):
        for master in (0, 1, 2**64 - 1):
            self.assertLess(derive_seed(master, "fixture"), 2**64)
            self.assertGreaterEqual(derive_seed(master, "fixture"), 0)


class FileDigestTests(SimpleTestCase):
    def test_content_and_order_matter(self):
        with tempfile.TemporaryDirectory() as tmp:
            a, b = Path(tmp) / "a.csv", Path(tmp) / "b.csv"
            a.write_text("x\n1\n")
            b.write_text("x\n2\n")
            first = file_digest(a, b)
            self.assertEqual(first, file_digest(a, b))
            self.assertNotEqual(first, file_digest(b, a))
            b.write_text("x\n3\n")
            self.assertNotEqual(first, file_digest(a, b))

    def test_missing_file_still_digests(self):
        with tempfile.TemporaryDirectory() as tmp:
            missing = Path(tmp) / "nope.csv"
            absent = file_digest(missing)
            self.assertEqual(len(absent), 64)
            missing.write_text("")
            self.assertNotEqual(file_digest(missing), absent)

    def test_errors_are_runtime_errors(self):
        self.assertTrue(issubclass(PopSynthError, RuntimeError))
