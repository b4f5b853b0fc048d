# tabular/io.py
from __future__ import annotations

import logging
from pathlib import Path
from typing import Sequence

import numpy as np
import pandas as pd

from .schema import LevelError, Schema, SchemaError
from .services import bin_values
from .tables import RecordTable

logger = logging.getLogger(__name__)


def encode_frame(frame: pd.DataFrame, schema: Schema) -> RecordTable:
    """Level strings / decimals per column -> category-index RecordTable."""
    missing = [lb for lb in schema.labels if lb not in frame.columns]
    if missing:
        raise SchemaError(f"Columns missing from input: {missing}")

    n = len(frame)
    codes = np.zeros((n, len(schema)), dtype=np.int64)
    for j, attr in enumerate(schema.attributes):
        text = frame[attr.label].astype(str).str.strip()
        lookup = {lv: i for i, lv in enumerate(attr.categories)}
        mapped = text.map(lookup)

        if attr.is_continuous:
            # Raw decimals get binned; already-binned labels (our own outputs) pass through.
            raw = mapped.isna()
            if raw.any():
                try:
                    values = pd.to_numeric(text[raw], errors="raise").to_numpy(dtype=float)
                except (ValueError, TypeError) as e:
                    raise SchemaError(f"{attr.label}: non-numeric value in continuous column ({e})")
                mapped = mapped.astype(float)
                mapped.loc[raw] = bin_values(values, attr)
            codes[:, j] = mapped.to_numpy(dtype=np.int64)
            continue

        if mapped.isna().any():
            bad = sorted(set(text[mapped.isna()]))[:10]
            raise LevelError(f"{attr.label}: unknown levels {bad}; expected {list(attr.levels)}")
        codes[:, j] = mapped.to_numpy(dtype=np.int64)
    return RecordTable(schema, codes)


def read_records(path, schema: Schema, *, id_columns: Sequence[str] = ()) -> tuple[dict[str, np.ndarray], RecordTable]:
    """
    Read a CSV whose header row holds attribute labels.

    Returns the requested id columns (as string arrays) and the encoded records.
    """
    path = Path(path)
    if not path.exists():
        raise SchemaError(f"File not found: {path}")
    frame = pd.read_csv(path, dtype=str, keep_default_na=False)
    frame.columns = [str(c).strip() for c in frame.columns]

    ids = {}
    for col in id_columns:
        if col not in frame.columns:
            raise SchemaError(f"{path.name}: id column {col!r} missing (found {list(frame.columns)})")
        ids[col] = frame[col].astype(str).str.strip().to_numpy(dtype=object)

    table = encode_frame(frame, schema)
    logger.debug("Read %s rows from %s", len(table), path)
    return ids, table


def records_frame(table: RecordTable, *, ids: dict[str, Sequence] | None = None) -> pd.DataFrame:
    frame = table.to_frame()
    for pos, (col, values) in enumerate((ids or {}).items()):
        frame.insert(pos, col, np.asarray(values, dtype=object))
    return frame


def write_records(path, table: RecordTable, *, ids: dict[str, Sequence] | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    records_frame(table, ids=ids).to_csv(path, index=False, lineterminator="\n")
    return path
