import contextlib
import io
import math
import shutil
import tempfile
from dataclasses import replace
from pathlib import Path
from unittest import mock

import pandas as pd
from django.test import SimpleTestCase, TestCase, tag

from bn_sample.network import BayesNet
from core.seeds import file_digest, stage_rng
from ipf.constraints import read_marginal
from tabular.services import tabulate

from .cli import cli
from .config import DEFAULT_BIN_EDGES, ConfigError, PipelineConfig
from .fixture import FixtureError, FixtureSpec, draw_sample, draw_truth, make_fixture, truth_network
from .models import PipelineRun, StageRun
from .services import StageError, run_pipeline, run_stage
from .stages import STAGE_ORDER, Artifacts, read_population

SCHEMA_TOML = """
[schema]
household_id = "household_id"

[[schema.attributes]]
label = "AREA"
level = "household"
levels = ["1", "2"]

[[schema.attributes]]
label = "AGEP"
level = "person"
bin_edges = [0, 18, 65, 100]
"""


def _tree(root: Path) -> dict[str, bytes]:
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def _small_fixture(root: Path, seed: int = 3) -> Path:
    """A quick fixture whose config learns two DAG methods with 3 folds."""
    files = make_fixture(FixtureSpec(population_size=4000, sample_fraction=0.25), seed, root)
    with files.config.open("a", encoding="utf-8") as f:
        f.write('\n[dag]\nmethods = ["FEB", "HASL"]\nfolds = 3\n')
    return files.config


class ConfigTests(SimpleTestCase):
    def _write(self, tmp, body: str) -> Path:
        path = Path(tmp) / "pipeline.toml"
        path.write_text(SCHEMA_TOML + body, encoding="utf-8")
        return path

    def test_relative_paths_resolve_against_the_file(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = self._write(tmp, '\n[inputs]\nhouseholds = "data/h.csv"\npersons = "data/p.csv"\n'
                                    '\n[generation]\nconditional = ["AREA"]\n')
            config = PipelineConfig.from_toml(path, seed=11)
            self.assertEqual(config.households_path, (Path(tmp) / "data" / "h.csv").resolve())
            self.assertEqual(config.seed, 11)
            self.assertEqual(config.conditional, ("AREA",))
            self.assertEqual(config.threshold, 5)
            self.assertEqual(config.folds, 5)

    def test_unknown_conditional_label(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = self._write(tmp, '\n[inputs]\nhouseholds = "h.csv"\npersons = "p.csv"\n'
                                    '\n[generation]\nconditional = ["NOPE"]\n')
            with self.assertRaises(ConfigError):
                PipelineConfig.from_toml(path)

    def test_threshold_and_folds_bounds(self):
        with tempfile.TemporaryDirectory() as tmp:
            for body in ("\n[generation]\nthreshold = 0\n", "\n[dag]\nfolds = 1\n"):
                path = self._write(tmp, '\n[inputs]\nhouseholds = "h.csv"\npersons = "p.csv"\n' + body)
                with self.assertRaises(ConfigError):
                    PipelineConfig.from_toml(path)

    def test_unknown_method(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = self._write(tmp, '\n[inputs]\nhouseholds = "h.csv"\npersons = "p.csv"\n'
                                    '\n[dag]\nmethods = ["GREEDY"]\n')
            with self.assertRaises(ConfigError):
                PipelineConfig.from_toml(path)

    def test_missing_or_malformed_file(self):
        with tempfile.TemporaryDirectory() as tmp:
            with self.assertRaises(ConfigError):
                PipelineConfig.from_toml(Path(tmp) / "absent.toml")
            bad = Path(tmp) / "bad.toml"
            bad.write_text("[schema\n", encoding="utf-8")
            with self.assertRaises(ConfigError):
                PipelineConfig.from_toml(bad)

    def test_commute_time_gets_default_bins(self):
        with tempfile.TemporaryDirectory() as tmp:
            commute = '\n[[schema.attributes]]\nlabel = "JWMNP"\nlevel = "person"\n'
            inputs = '\n[inputs]\nhouseholds = "h.csv"\npersons = "p.csv"\n'
            config = PipelineConfig.from_toml(self._write(tmp, commute + inputs))
            self.assertEqual(config.schema.get("JWMNP").bin_edges, DEFAULT_BIN_EDGES["JWMNP"])
            self.assertEqual(config.schema.get("JWMNP").cardinality, 6)

            explicit = PipelineConfig.from_toml(self._write(tmp, commute + "bin_edges = [0, 30, 140]\n" + inputs))
            self.assertEqual(explicit.schema.get("JWMNP").cardinality, 2)


class FixtureTests(SimpleTestCase):
    def test_spec_validation(self):
        for kwargs in ({"sample_fraction": 0.0}, {"sample_fraction": 1.5}, {"bias": (1.0, 0.0, 1.0, 1.0)},
                       {"bias": (1.0, 1.0)}):
            with self.assertRaises(FixtureError):
                FixtureSpec(**kwargs)

    def test_full_uniform_sample_is_the_truth(self):
        spec = FixtureSpec(population_size=1500, sample_fraction=1.0, bias=(1.0, 1.0, 1.0, 1.0))
        with tempfile.TemporaryDirectory() as tmp:
            files = make_fixture(spec, 5, tmp)
            self.assertEqual(files.sample_households.read_bytes(), files.truth_households.read_bytes())
            self.assertEqual(files.sample_persons.read_bytes(), files.truth_persons.read_bytes())

    def test_census_tables_sum_to_the_truth(self):
        spec = FixtureSpec(population_size=3000)
        with tempfile.TemporaryDirectory() as tmp:
            files = make_fixture(spec, 1, tmp)
            n_households = len(pd.read_csv(files.truth_households))
            n_persons = len(pd.read_csv(files.truth_persons))
            self.assertLessEqual(n_persons, spec.population_size)
            self.assertGreater(n_persons, spec.population_size - spec.max_size)

            config = PipelineConfig.from_toml(files.config)
            for m in config.marginals:
                constraint = read_marginal(m.path, config.marginal_schema, level=m.level)
                expected = n_households if constraint.level == "household" else n_persons
                self.assertEqual(constraint.total, expected, m.path.name)

    def test_same_seed_same_files(self):
        spec = FixtureSpec(population_size=2000)
        with tempfile.TemporaryDirectory() as a, tempfile.TemporaryDirectory() as b:
            make_fixture(spec, 9, a)
            make_fixture(spec, 9, b)
            self.assertEqual(_tree(Path(a)), _tree(Path(b)))

    def test_bias_multiplier_scales_inclusion(self):
        spec = FixtureSpec(sample_fraction=0.1, bias=(2.0, 1.0, 1.0, 1.0))
        households, persons = draw_truth(spec, stage_rng(0, "fixture"))
        sampled, _ = draw_sample(spec, households, persons, stage_rng(0, "fixture-sample"))
        for area, rate in (("1", 0.2), ("2", 0.1), ("3", 0.1)):
            n = int((households["AREA"] == area).sum())
            got = int((sampled["AREA"] == area).sum())
            self.assertLessEqual(abs(got - n * rate), 4 * math.sqrt(n * rate * (1 - rate)), area)

    def test_sample_is_drawn_from_the_truth(self):
        spec = FixtureSpec(population_size=20_000)
        households, persons = draw_truth(spec, stage_rng(2, "fixture"))
        sampled, sampled_persons = draw_sample(spec, households, persons, stage_rng(2, "fixture-sample"))
        truth_keys = set(map(tuple, households[["AREA", "HINCP", "VEH"]].to_numpy().tolist()))
        sample_keys = set(map(tuple, sampled[["AREA", "HINCP", "VEH"]].to_numpy().tolist()))
        self.assertTrue(sample_keys <= truth_keys)
        self.assertEqual(set(sampled_persons["household_id"]), set(sampled["household_id"]))

    def test_truth_networks_are_saved(self):
        spec = FixtureSpec(population_size=1000)
        with tempfile.TemporaryDirectory() as tmp:
            files = make_fixture(spec, 3, tmp)
            self.assertEqual(sorted(files.networks), list(range(1, spec.max_size + 1)))
            for k, path in files.networks.items():
                net = BayesNet.load(path)
                self.assertEqual(net.schema.labels, truth_network(spec, k).schema.labels)
                self.assertTrue({("AREA", "HINCP"), ("HINCP", "VEH"), ("AREA", "RACWHT_1")} <= net.dag.edges)
                if k >= 2:
                    self.assertIn(("AGEP_1", "AGEP_2"), net.dag.edges)
        with self.assertRaises(FixtureError):
            truth_network(spec, spec.max_size + 1)

    def test_truth_follows_its_networks(self):
        spec = FixtureSpec(population_size=30_000)
        households, persons = draw_truth(spec, stage_rng(4, "fixture"))
        area_1 = households[households["AREA"] == "1"]
        n = len(area_1)
        for level, p in zip(("low", "mid", "high"), spec.income_given_area[0]):
            got = float((area_1["HINCP"] == level).mean())
            self.assertLessEqual(abs(got - p), 4 * math.sqrt(p * (1 - p) / n), level)

        size = persons.groupby("household_id").size()
        self.assertEqual(len(size), len(households))
        self.assertTrue(size.between(1, spec.max_size).all())
        self.assertEqual(list(households["household_id"][:2]), ["T0000001", "T0000002"])
        self.assertTrue(persons["AGEP"].between(0, 99).all())


class CliTests(SimpleTestCase):
    def _cli(self, *argv):
        out, err = io.StringIO(), io.StringIO()
        with contextlib.redirect_stderr(err):
            code = cli(list(argv), stdout=out, stderr=err)
        return code, out.getvalue(), err.getvalue()

    def test_usage_errors_exit_2(self):
        self.assertEqual(self._cli("explode")[0], 2)
        self.assertEqual(self._cli()[0], 2)
        self.assertEqual(self._cli("run")[0], 2)
        self.assertEqual(self._cli("run", "--config", "x.toml", "--seed", "abc")[0], 2)
        self.assertEqual(self._cli("run", "--config", "x.toml", "--bogus")[0], 2)

    def test_domain_error_exits_1(self):
        with tempfile.TemporaryDirectory() as tmp:
            code, _, err = self._cli("compose", "--config", str(Path(tmp) / "absent.toml"), "--no-record")
        self.assertEqual(code, 1)
        self.assertIn("absent.toml", err)

    def test_fixture_subcommand(self):
        with tempfile.TemporaryDirectory() as tmp:
            code, out, _ = self._cli("fixture", "--out", tmp, "--seed", "4", "--population", "800")
            self.assertEqual(code, 0)
            self.assertTrue((Path(tmp) / "pipeline.toml").exists())
            self.assertTrue((Path(tmp) / "census" / "household_area_size.csv").exists())
            self.assertIn("Fixture written", out)


class PipelineRunTests(SimpleTestCase):
    """One small fixture, run monolithically, through the CLI and stage by stage."""

    @classmethod
    def setUpClass(cls):
        super().setUpClass()
        cls.tmp = Path(tempfile.mkdtemp())
        cls.config_path = _small_fixture(cls.tmp / "fixture")
        cls.config = PipelineConfig.from_toml(cls.config_path, seed=7, output_dir=cls.tmp / "mono")
        cls.result = run_pipeline(cls.config, record=False)

    @classmethod
    def tearDownClass(cls):
        shutil.rmtree(cls.tmp, ignore_errors=True)
        super().tearDownClass()

    def test_size_skipped_by_learn_dag_is_explained(self):
        strict = replace(self.config, folds=100_000, output_dir=self.tmp / "strict")
        with self.assertRaises(StageError) as ctx:
            run_pipeline(strict, record=False, stages=["compose", "learn-dag", "fit", "condpop", "generate"])
        self.assertEqual(ctx.exception.stage, "generate")
        self.assertIn("learn-dag skipped it", str(ctx.exception))
        self.assertIn("[dag] folds", str(ctx.exception))

    def test_cli_run_is_byte_identical(self):
        out = self.tmp / "cli"
        code = cli(["run", "--config", str(self.config_path), "--seed", "7", "--out", str(out), "--no-record"],
                   stdout=io.StringIO(), stderr=io.StringIO())
        self.assertEqual(code, 0)
        self.assertEqual(_tree(out), _tree(self.config.output_dir))

    def test_stages_run_separately_match_the_full_run(self):
        staged = self.config.with_overrides(output_dir=self.tmp / "staged")
        for name in STAGE_ORDER:
            run_stage(name, staged)
        self.assertEqual(_tree(staged.output_dir), _tree(self.config.output_dir))

    def test_validate_reproduces_the_report(self):
        metrics = Artifacts(self.config.output_dir).metrics
        before = metrics.read_bytes()
        code = cli(["validate", "--config", str(self.config_path), "--seed", "7",
                    "--out", str(self.config.output_dir), "--no-record"],
                   stdout=io.StringIO(), stderr=io.StringIO())
        self.assertEqual(code, 0)
        self.assertEqual(metrics.read_bytes(), before)

    def test_learn_dag_writes_dot_and_scores_per_method(self):
        art = Artifacts(self.config.output_dir)
        for k in self.config.sizes:
            for method in self.config.methods:
                self.assertTrue(art.dag(method, k).exists(), art.dag(method, k))
                self.assertTrue(art.scores(method, k).exists())
            self.assertTrue(art.summary(k).exists())
            self.assertTrue(art.model(k).exists())
            self.assertTrue(art.condpop(k).exists())

    def test_households_match_the_census_size_table(self):
        synthetic = read_population(Artifacts(self.config.output_dir).households,
                                    Artifacts(self.config.output_dir).persons, self.config)
        records = synthetic.household_records(size_label="NP", threshold=self.config.threshold)
        census = read_marginal(self.tmp / "fixture" / "census" / "household_area_size.csv",
                               self.config.marginal_schema)
        self.assertEqual(tabulate(records, ("AREA", "NP")).cells, census.targets)

    def test_person_count_conserved(self):
        art = Artifacts(self.config.output_dir)
        households = pd.read_csv(art.households, dtype=str)
        persons = pd.read_csv(art.persons, dtype=str)
        sizes = persons.groupby("household_id").size()
        self.assertEqual(len(sizes), len(households))
        for k in self.config.sizes:
            block = sizes[sizes.index.str.startswith(f"H{k}-")]
            self.assertTrue((block == k).all())
        overflow = sizes[sizes.index.str.startswith("R")]
        self.assertTrue((overflow > self.config.threshold).all())
        self.assertEqual(int(sizes.sum()), len(persons))

    def test_report_covers_both_populations(self):
        report = self.result.report
        self.assertEqual(set(report.populations), {"synthetic", "baseline", "sample", "truth"})
        for name in ("AREAxAGEPxRACWHT", "AREAxNP"):
            self.assertIsNotNone(report.comparison(name, "synthetic"))
            self.assertIsNotNone(report.comparison(name, "baseline"))
        self.assertEqual(report.populations["synthetic"]["households"],
                         report.populations["truth"]["households"])
        reports = Artifacts(self.config.output_dir).marginal_report
        self.assertTrue((reports / "AREAxAGEPxRACWHT.csv").exists())


class RunLedgerTests(TestCase):
    def test_successful_stage_is_recorded(self):
        with tempfile.TemporaryDirectory() as tmp:
            config_path = _small_fixture(Path(tmp) / "fixture")
            config = PipelineConfig.from_toml(config_path, output_dir=Path(tmp) / "out")
            result = run_pipeline(config, record=True, stages=["compose"])

        run = PipelineRun.objects.get()
        self.assertEqual(run.pk, result.run.pk)
        self.assertEqual(run.status, PipelineRun.STATUS_SUCCEEDED)
        self.assertEqual(run.config_digest, file_digest(config_path))
        stage = StageRun.objects.get(run=run)
        self.assertEqual(stage.stage, "compose")
        self.assertEqual(stage.status, PipelineRun.STATUS_SUCCEEDED)
        self.assertEqual(stage.inputs_digest, file_digest(config.households_path, config.persons_path))
        self.assertIn("households", stage.detail)
        for f in StageRun._meta.concrete_fields:
            self.assertIsNotNone(getattr(stage, f.attname), f.name)

    def test_failure_names_the_stage(self):
        with tempfile.TemporaryDirectory() as tmp:
            config = PipelineConfig.from_dict(
                {"schema": {"attributes": [
                    {"label": "AREA", "level": "household", "levels": ["1", "2"]},
                    {"label": "AGEP", "level": "person", "levels": ["0", "1"]},
                ]}, "inputs": {"households": "missing_h.csv", "persons": "missing_p.csv"}, "output_dir": "out"},
                base_dir=tmp,
            )
            with self.assertRaises(StageError) as ctx:
                run_pipeline(config, record=True)

        self.assertEqual(ctx.exception.stage, "compose")
        self.assertEqual(len(ctx.exception.digest), 64)
        run = PipelineRun.objects.get()
        self.assertEqual((run.status, run.failed_stage), (PipelineRun.STATUS_FAILED, "compose"))
        self.assertEqual(StageRun.objects.get(run=run).status, PipelineRun.STATUS_FAILED)

    def test_unexpected_error_fails_the_stage_and_the_run(self):
        with tempfile.TemporaryDirectory() as tmp:
            config = PipelineConfig.from_toml(_small_fixture(Path(tmp) / "fixture"), output_dir=Path(tmp) / "out")
            run_pipeline(config, record=False, stages=["compose", "learn-dag"])
            summary = sorted((Artifacts(config.output_dir).root / "dags").glob("summary_*.json"))[0]
            summary.write_text('{"size": 1}\n', encoding="utf-8")
            with self.assertRaises(StageError) as ctx:
                run_pipeline(config, record=True, stages=["fit"])

        self.assertIsInstance(ctx.exception.cause, KeyError)
        run = PipelineRun.objects.get()
        self.assertEqual((run.status, run.failed_stage), (PipelineRun.STATUS_FAILED, "fit"))
        stage = StageRun.objects.get(run=run)
        self.assertEqual(stage.status, PipelineRun.STATUS_FAILED)
        self.assertEqual(stage.detail["type"], "KeyError")

    def test_run_is_closed_when_the_runner_itself_fails(self):
        config = PipelineConfig.from_dict(
            {"schema": {"attributes": [
                {"label": "AREA", "level": "household", "levels": ["1", "2"]},
                {"label": "AGEP", "level": "person", "levels": ["0", "1"]},
            ]}, "inputs": {"households": "h.csv", "persons": "p.csv"}},
        )
        with mock.patch("pipeline.services.run_stage", side_effect=RuntimeError("disk vanished")):
            with self.assertRaises(RuntimeError):
                run_pipeline(config, record=True)
        run = PipelineRun.objects.get()
        self.assertEqual((run.status, run.failed_stage), (PipelineRun.STATUS_FAILED, "compose"))
        self.assertEqual(run.error_message, "disk vanished")
        self.assertIsNotNone(run.finished_at)


@tag("slow")
class AcceptanceTests(SimpleTestCase):
    """50,000-person ground truth, 5% biased sample, every DAG method."""

    def test_synthetic_beats_replicated_sample(self):
        with tempfile.TemporaryDirectory() as tmp:
            files = make_fixture(FixtureSpec(), 2024, Path(tmp) / "fixture")
            config = PipelineConfig.from_toml(files.config, output_dir=Path(tmp) / "out")
            report = run_pipeline(config, record=False).report

        synthetic = report.comparison("AREAxAGEPxRACWHT", "synthetic")
        baseline = report.comparison("AREAxAGEPxRACWHT", "baseline")
        self.assertLess(synthetic.srmse, baseline.srmse)

        entropy = {e.population: e.entropy for e in report.diversity if e.level == "household"}
        self.assertGreaterEqual(entropy["synthetic"], entropy["baseline"])

        recovered = [z.recovered for z in report.sampling_zeros if z.population == "synthetic"]
        self.assertGreaterEqual(max(recovered), 1)
