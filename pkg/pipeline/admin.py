from django.contrib import admin

from .models import PipelineRun, StageRun


class StageRunInline(admin.TabularInline):
    model = StageRun
    extra = 0
    fields = ("stage", "status", "duration_seconds", "inputs_digest")
    readonly_fields = fields


@admin.register(PipelineRun)
class PipelineRunAdmin(admin.ModelAdmin):
    inlines = [StageRunInline]

    list_display = (
        "id",
        "status",
        "seed",
        "config_path",
        "output_dir",
        "failed_stage",
        "created_at",
        "finished_at",
    )

    list_filter = ("status", "failed_stage")
    search_fields = ("config_path", "output_dir", "error_message")


@admin.register(StageRun)
class StageRunAdmin(admin.ModelAdmin):
    list_display = ("id", "run", "stage", "status", "duration_seconds")
    list_filter = ("stage", "status")
    search_fields = ("inputs_digest",)
