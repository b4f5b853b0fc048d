from django.contrib import admin
from django.urls import path

urlpatterns = [
    # Run ledger (PipelineRun / StageRun)
    path("admin/", admin.site.urls),
]
