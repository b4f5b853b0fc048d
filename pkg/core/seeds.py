# core/seeds.py
from __future__ import annotations

import hashlib

import numpy as np


def derive_seed(master: int, stage: str, size: int | None = None) -> int:
    """
    Fan a master seed out to a stage (and optionally a household size).

    seed = first 8 bytes of sha256("master:stage:size") read big-endian, so adding a
    stage never shifts the randomness of another one.
    """
    key = f"{int(master)}:{stage}:{'' if size is None else int(size)}"
    digest = hashlib.sha256(key.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big")


def stage_rng(master: int, stage: str, size: int | None = None) -> np.random.Generator:
    return np.random.default_rng(derive_seed(master, stage, size))


def file_digest(*paths) -> str:
    """sha256 over the bytes of the given files, in the given order (missing files count as empty)."""
    h = hashlib.sha256()
    for p in paths:
        h.update(str(p).encode("utf-8"))
        try:
            with open(p, "rb") as f:
                for chunk in iter(lambda: f.read(1 << 16), b""):
                    h.update(chunk)
        except (FileNotFoundError, IsADirectoryError):
            h.update(b"<missing>")
    return h.hexdigest()
