# pipeline/services.py
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

from django.conf import settings

from core.exceptions import PopSynthError
from core.seeds import file_digest
from metrics.report import MetricsReport

from .config import PipelineConfig
from .models import PipelineRun, StageRun
from .stages import STAGE_ORDER, STAGES, Artifacts, StageOutcome

logger = logging.getLogger(__name__)


class StageError(PopSynthError):
    """A stage failed; carries the stage name and the digest of the files it read."""

    def __init__(self, stage: str, digest: str, cause: Exception):
        self.stage = stage
        self.digest = digest
        self.cause = cause
        super().__init__(f"Stage {stage!r} failed (inputs sha256 {digest[:12]}): {cause}")


@dataclass
class RunResult:
    output_dir: Path
    outcomes: list[StageOutcome] = field(default_factory=list)
    report: MetricsReport | None = None
    run: PipelineRun | None = None


def _record_runs_default() -> bool:
    return bool((getattr(settings, "POPSYNTH", {}) or {}).get("RECORD_RUNS", True))


def run_stage(name: str, config: PipelineConfig, *, run: PipelineRun | None = None) -> StageOutcome:
    """Run one stage against config.output_dir; failures come back as StageError."""
    try:
        stage = STAGES[name]
    except KeyError:
        raise ValueError(f"Unknown stage {name!r}; expected one of {list(STAGE_ORDER)}")

    art = Artifacts(Path(config.output_dir))
    art.root.mkdir(parents=True, exist_ok=True)
    digest = file_digest(*stage.inputs(config, art))
    ledger = StageRun.objects.create(run=run, stage=name, inputs_digest=digest) if run is not None else None

    logger.info("Stage %s starting (inputs %s)", name, digest[:12])
    started = time.perf_counter()

    def fail(e: Exception) -> StageError:
        elapsed = time.perf_counter() - started
        if ledger is not None:
            ledger.status = PipelineRun.STATUS_FAILED
            ledger.duration_seconds = elapsed
            ledger.detail = {"error": str(e), "type": type(e).__name__}
            ledger.save(update_fields=["status", "duration_seconds", "detail"])
        return StageError(name, digest, e)

    try:
        outcome = stage.run(config, art)
    except (PopSynthError, ValueError, OSError) as e:
        logger.error("Stage %s failed after %.2fs: %s", name, time.perf_counter() - started, e)
        raise fail(e) from e
    except Exception as e:
        logger.exception("Stage %s crashed", name)
        raise fail(e) from e

    elapsed = time.perf_counter() - started
    logger.info("Stage %s finished in %.2fs (%s file(s) written)", name, elapsed, len(outcome.outputs))
    if ledger is not None:
        ledger.status = PipelineRun.STATUS_SUCCEEDED
        ledger.duration_seconds = elapsed
        ledger.detail = outcome.detail
        ledger.save(update_fields=["status", "duration_seconds", "detail"])
    return outcome


def run_pipeline(config: PipelineConfig, *, record: bool | None = None,
                 stages: Sequence[str] | None = None) -> RunResult:
    """
    compose -> learn-dag -> fit -> condpop -> generate -> validate, each persisting its
    artifacts under config.output_dir. With `record` a PipelineRun/StageRun ledger is
    kept in the database; it never changes the files written.
    """
    if record is None:
        record = _record_runs_default()
    names = list(stages or STAGE_ORDER)

    run = None
    if record:
        run = PipelineRun.objects.create(
            config_path=str(config.source or ""),
            config_digest=file_digest(config.source) if config.source else "",
            seed=config.seed,
            output_dir=str(config.output_dir),
            status=PipelineRun.STATUS_RUNNING,
        )

    result = RunResult(Path(config.output_dir), run=run)
    current = ""
    try:
        for current in names:
            result.outcomes.append(run_stage(current, config, run=run))
        if "validate" in names:
            current = "validate"
            result.report = MetricsReport.load(Artifacts(result.output_dir).metrics)
    except StageError as e:
        if run is not None:
            run.mark_failed(e.stage, str(e.cause))
        raise
    except Exception as e:
        if run is not None:
            run.mark_failed(current, str(e))
        raise

    if run is not None:
        run.mark_succeeded(result.report.to_dict() if result.report else None)
    logger.info("Pipeline finished: %s stage(s) into %s", len(names), result.output_dir)
    return result
