# pipeline/models.py

from django.db import models
from django.utils import timezone


class PipelineRun(models.Model):
    """
    One invocation of the synthesis pipeline. Bookkeeping only: nothing here is read
    back by the stages, so output trees do not depend on the ledger.
    """

    STATUS_PENDING = "pending"
    STATUS_RUNNING = "running"
    STATUS_SUCCEEDED = "succeeded"
    STATUS_FAILED = "failed"

    STATUS_CHOICES = [
        (STATUS_PENDING, "Pending"),
        (STATUS_RUNNING, "Running"),
        (STATUS_SUCCEEDED, "Succeeded"),
        (STATUS_FAILED, "Failed"),
    ]

    config_path = models.CharField(max_length=500, blank=True, default="")
    config_digest = models.CharField(max_length=64, blank=True, default="")
    seed = models.DecimalField(max_digits=20, decimal_places=0, default=0)
    output_dir = models.CharField(max_length=500)

    status = models.CharField(max_length=20, choices=STATUS_CHOICES, default=STATUS_PENDING)
    failed_stage = models.CharField(max_length=40, blank=True, default="")
    error_message = models.TextField(blank=True, default="")
    metrics = models.JSONField(blank=True, null=True)

    created_at = models.DateTimeField(default=timezone.now, editable=False)
    finished_at = models.DateTimeField(blank=True, null=True)

    class Meta:
        ordering = ["-created_at"]

    def __str__(self) -> str:
        return f"Run #{self.pk} ({self.status})"

    def mark_succeeded(self, metrics: dict | None = None) -> None:
        self.status = self.STATUS_SUCCEEDED
        self.metrics = metrics
        self.finished_at = timezone.now()
        self.save(update_fields=["status", "metrics", "finished_at"])

    def mark_failed(self, stage: str, message: str) -> None:
        self.status = self.STATUS_FAILED
        self.failed_stage = stage
        self.error_message = message
        self.finished_at = timezone.now()
        self.save(update_fields=["status", "failed_stage", "error_message", "finished_at"])


class StageRun(models.Model):
    run = models.ForeignKey(PipelineRun, on_delete=models.CASCADE, related_name="stages")
    stage = models.CharField(max_length=40)
    inputs_digest = models.CharField(max_length=64)

    status = models.CharField(
        max_length=20,
        choices=PipelineRun.STATUS_CHOICES,
        default=PipelineRun.STATUS_RUNNING,
    )
    duration_seconds = models.FloatField(blank=True, null=True)
    detail = models.JSONField(blank=True, default=dict)

    created_at = models.DateTimeField(default=timezone.now, editable=False)

    class Meta:
        ordering = ["run", "created_at", "id"]

    def __str__(self) -> str:
        return f"{self.stage} [{self.status}]"
