"""CSV and JSON output with a fixed float format.

CSV: header row, ``%.17g`` floats (round-trips float64 exactly), LF line
endings. JSON: an object carrying ``schema_version: 1``.
"""

from __future__ import annotations

import csv
import io
import json
import math
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

SCHEMA_VERSION = 1


def format_value(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v)).lower()
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        if not math.isfinite(v):
            raise ValueError(f"refusing to write non-finite value {v}")
        return "%.17g" % v
    return str(v)


def csv_text(header: Sequence[str], rows: Iterable[Sequence]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([format_value(v) for v in row])
    return buf.getvalue()


def emit_csv(header: Sequence[str], rows: Iterable[Sequence], path=None) -> str:
    """Write a CSV table to ``path`` (or just return the text when ``path`` is None)."""
    text = csv_text(header, rows)
    if path is not None:
        _write(path, text)
    return text


def emit_json(payload: dict, path=None) -> str:
    doc = {"schema_version": SCHEMA_VERSION, **payload}
    text = json.dumps(_jsonable(doc), indent=2, sort_keys=True) + "\n"
    if path is not None:
        _write(path, text)
    return text


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        if not math.isfinite(obj):
            raise ValueError(f"refusing to write non-finite value {obj}")
        return float(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


def _write(path, text: str) -> None:
    path = Path(path)
    try:
        with open(path, "w", newline="") as fh:
            fh.write(text)
    except OSError as exc:
        raise OSError(f"{path}: {exc.strerror or exc}") from exc


def matrix_header(prefix: str, n: int) -> list[str]:
    return [f"{prefix}{i + 1}" for i in range(n)]


def emit_matrix(M, prefix: str, path=None) -> str:
    """A 2-D array as CSV with columns ``<prefix>1..<prefix>n``."""
    M = np.atleast_2d(np.asarray(M, dtype=np.float64))
    return emit_csv(matrix_header(prefix, M.shape[1]), M.tolist(), path)


def read_matrix(path) -> np.ndarray:
    """Read a numeric CSV with one header row back into a 2-D float array."""
    path = Path(path)
    try:
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise OSError(f"{path}: {exc.strerror or exc}") from exc
    if not rows:
        raise ValueError(f"{path}: empty file")
    body = rows[1:]
    ncol = len(rows[0])
    if not body:
        return np.zeros((0, ncol))
    try:
        M = np.array([[float(v) for v in r] for r in body], dtype=np.float64)
    except ValueError as exc:
        raise ValueError(f"{path}: {exc}") from None
    if M.shape[1] != ncol:
        raise ValueError(f"{path}: ragged rows")
    return M


def read_table(path) -> tuple[list[str], list[list[str]]]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return rows[0], rows[1:]
