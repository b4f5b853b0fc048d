import os
from pathlib import Path

import dj_database_url
from dotenv import load_dotenv

BASE_DIR = Path(__file__).resolve().parent.parent

# -----------------------------------------------------------------------------
# Load environment variables from .env
# Priority (first found wins):
#   1) BASE_DIR / "popsynth" / ".env"
#   2) BASE_DIR / ".env"
# -----------------------------------------------------------------------------
DOTENV_1 = BASE_DIR / "popsynth" / ".env"
DOTENV_2 = BASE_DIR / ".env"

if DOTENV_1.exists():
    load_dotenv(DOTENV_1)
elif DOTENV_2.exists():
    load_dotenv(DOTENV_2)

# =============================================================================
# Core
# =============================================================================
SECRET_KEY = os.environ.get("SECRET_KEY", "dev-only")

DEBUG = os.environ.get("DEBUG", "1") == "1"

ALLOWED_HOSTS = os.environ.get("ALLOWED_HOSTS", "127.0.0.1,localhost").split(",")
ALLOWED_HOSTS = [h.strip() for h in ALLOWED_HOSTS if h.strip()]

# =============================================================================
# Applications
# =============================================================================
INSTALLED_APPS = [
    "django.contrib.admin",
    "django.contrib.auth",
    "django.contrib.contenttypes",
    "django.contrib.sessions",
    "django.contrib.messages",
    "django.contrib.staticfiles",
    # project apps
    "core",
    "tabular",
    "composition",
    "dag_learn",
    "bn_sample",
    "ipf",
    "metrics",
    "pipeline.apps.PipelineAppConfig",
]

MIDDLEWARE = [
    "django.middleware.security.SecurityMiddleware",
    "django.contrib.sessions.middleware.SessionMiddleware",
    "django.middleware.common.CommonMiddleware",
    "django.middleware.csrf.CsrfViewMiddleware",
    "django.contrib.auth.middleware.AuthenticationMiddleware",
    "django.contrib.messages.middleware.MessageMiddleware",
    "django.middleware.clickjacking.XFrameOptionsMiddleware",
]

ROOT_URLCONF = "popsynth.urls"

TEMPLATES = [
    {
        "BACKEND": "django.template.backends.django.DjangoTemplates",
        "DIRS": [],
        "APP_DIRS": True,
        "OPTIONS": {
            "context_processors": [
                "django.template.context_processors.request",
                "django.contrib.auth.context_processors.auth",
                "django.contrib.messages.context_processors.messages",
            ],
        },
    },
]

WSGI_APPLICATION = "popsynth.wsgi.application"

# =============================================================================
# Database (run ledger)
# =============================================================================
DATABASES = {
    "default": dj_database_url.config(
        default=f"sqlite:///{BASE_DIR / 'db.sqlite3'}",
        conn_max_age=600,
    )
}

DEFAULT_AUTO_FIELD = "django.db.models.BigAutoField"

STATIC_URL = "/static/"
STATIC_ROOT = BASE_DIR / "staticfiles"

# =============================================================================
# Population synthesis
# =============================================================================
POPSYNTH = {
    "OUTPUT_DIR": os.environ.get("POPSYNTH_OUTPUT_DIR", str(BASE_DIR / "output")),
    "SEED": int(os.environ.get("POPSYNTH_SEED", "0")),
    "RECORD_RUNS": os.environ.get("POPSYNTH_RECORD_RUNS", "1") == "1",
    "LOG_LEVEL": os.environ.get("POPSYNTH_LOG_LEVEL", "INFO").strip().upper() or "INFO",
    "PARENT_CONFIG_CAP": int(os.environ.get("POPSYNTH_PARENT_CONFIG_CAP", "1000000")),
}

# =============================================================================
# Logging
# =============================================================================
LOGGING = {
    "version": 1,
    "disable_existing_loggers": False,
    "formatters": {
        "timestamped": {"format": "%(asctime)s %(levelname)s %(name)s: %(message)s"},
    },
    "handlers": {
        "console": {"class": "logging.StreamHandler", "formatter": "timestamped"},
    },
    "root": {"handlers": ["console"], "level": POPSYNTH["LOG_LEVEL"]},
    "loggers": {
        "django.request": {
            "handlers": ["console"],
            "level": "ERROR",
            "propagate": False,
        },
    },
}
