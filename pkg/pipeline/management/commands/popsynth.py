# pipeline/management/commands/popsynth.py
import argparse
from pathlib import Path

from django.conf import settings
from django.core.management.base import BaseCommand, CommandError

from core.exceptions import PopSynthError
from pipeline.config import PipelineConfig
from pipeline.fixture import FixtureSpec, make_fixture
from pipeline.services import run_pipeline
from pipeline.stages import STAGE_ORDER

SEED_MAX = 2**64 - 1


def seed_value(text: str) -> int:
    try:
        value = int(text, 0)
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid seed {text!r}")
    if not 0 <= value <= SEED_MAX:
        raise argparse.ArgumentTypeError(f"seed must lie in [0, 2**64 - 1], got {value}")
    return value


def multipliers(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(x) for x in text.split(",") if x.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"bias must be comma-separated numbers, got {text!r}")


class Command(BaseCommand):
    help = "Household/person population synthesis: fixture, individual stages, or the full run"
    requires_system_checks = []

    def add_arguments(self, parser):
        subparsers = parser.add_subparsers(dest="subcommand", required=True, metavar="subcommand")

        fixture = subparsers.add_parser("fixture", help="Write a ground-truth population, biased sample and census tables")
        fixture.add_argument("--seed", type=seed_value, default=None, help="Master seed (default: POPSYNTH_SEED)")
        fixture.add_argument("--out", type=Path, required=True, help="Directory for the fixture files")
        fixture.add_argument("--population", type=int, default=50_000, help="Persons in the ground truth")
        fixture.add_argument("--fraction", type=float, default=0.05, help="Base household sampling fraction")
        fixture.add_argument("--bias", type=multipliers, default=None,
                             help="Per-area sampling multipliers, e.g. 1.6,1,0.7,0.5")
        fixture.add_argument("--threshold", type=int, default=5, help="Largest household size modelled directly")

        for name in STAGE_ORDER + ("run",):
            help_text = "Run every stage" if name == "run" else f"Run the {name} stage on persisted inputs"
            sub = subparsers.add_parser(name, help=help_text)
            sub.add_argument("--config", type=Path, required=True, help="Pipeline TOML file")
            sub.add_argument("--seed", type=seed_value, default=None, help="Override the config's master seed")
            sub.add_argument("--out", type=Path, default=None, help="Override the config's output directory")
            sub.add_argument("--no-record", action="store_true", help="Do not write the run ledger")

    def handle(self, *args, **options):
        subcommand = options["subcommand"]
        try:
            if subcommand == "fixture":
                self._fixture(options)
            else:
                self._pipeline(subcommand, options)
        except PopSynthError as e:
            raise CommandError(str(e), returncode=1)

    def _fixture(self, options):
        seed = options["seed"]
        if seed is None:
            seed = int(settings.POPSYNTH.get("SEED", 0))
        kwargs = {
            "population_size": options["population"],
            "sample_fraction": options["fraction"],
            "threshold": options["threshold"],
        }
        if options["bias"]:
            kwargs["bias"] = options["bias"]
        files = make_fixture(FixtureSpec(**kwargs), seed, options["out"])
        self.stdout.write(self.style.SUCCESS(
            f"Fixture written to {files.root} ({len(files.marginals)} census table(s)); config: {files.config}"
        ))

    def _pipeline(self, subcommand, options):
        config = PipelineConfig.from_toml(options["config"], seed=options["seed"], output_dir=options["out"])
        stages = None if subcommand == "run" else [subcommand]
        result = run_pipeline(config, record=False if options["no_record"] else None, stages=stages)

        written = sum(len(o.outputs) for o in result.outcomes)
        self.stdout.write(self.style.SUCCESS(f"{subcommand}: {written} file(s) written to {result.output_dir}"))
        if result.report is None:
            return
        for entry in result.report.comparisons:
            self.stdout.write(f"  {entry.population:<9} {entry.name:<24} srmse={entry.srmse:.4f} jsd={entry.jsd:.4f}")
        for entry in result.report.diversity:
            delta = "" if entry.delta is None else f" ({entry.delta:+.1%} vs baseline)"
            self.stdout.write(f"  {entry.population:<9} diversity {'x'.join(entry.attributes)} = {entry.entropy:.4f}{delta}")
