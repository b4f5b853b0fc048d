# pipeline/cli.py
"""Console entry point: `popsynth <subcommand> ...` behaves like `manage.py popsynth ...`."""
from __future__ import annotations

import os
import sys
from typing import Sequence


def cli(argv: Sequence[str] | None = None, *, stdout=None, stderr=None) -> int:
    """0 on success, 1 on a domain error, 2 on a usage error."""
    os.environ.setdefault("DJANGO_SETTINGS_MODULE", "popsynth.settings")
    import django

    django.setup()
    from pipeline.management.commands.popsynth import Command

    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        Command(stdout=stdout, stderr=stderr).run_from_argv(["manage.py", "popsynth", *argv])
    except SystemExit as e:
        if e.code is None:
            return 0
        return e.code if isinstance(e.code, int) else 1
    return 0


def main() -> None:
    sys.exit(cli())
