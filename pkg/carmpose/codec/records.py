"""
Line-delimited record files.

One JSON object per line. Floats are written with 17 significant digits so
files reload bit-exactly and are byte-identical across runs. Parse errors
carry the 1-based line number.

Prediction record: {"id", "scale", "i", "j", "anchor", "raw": [19 values]}
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterable, Iterator, Sequence

import numpy as np

from carmpose.codec.grid import VALUES_PER_PREDICTION, CellPrediction
from carmpose.errors import DataError, RecordFormatError

LOGGER = logging.getLogger(__name__)


def format_float(value: float) -> str:
    if not math.isfinite(value):
        raise ValueError(f"cannot serialize non-finite value {value}")
    text = format(value, ".17g")
    if not any(ch in text for ch in ".en"):
        text += ".0"
    return text


def dumps(obj: Any) -> str:
    """Canonical single-line JSON with fixed float formatting and key order as given."""
    if isinstance(obj, bool) or obj is None:
        return json.dumps(obj)
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        return format_float(float(obj))
    if isinstance(obj, str):
        return json.dumps(obj)
    if isinstance(obj, dict):
        return "{" + ", ".join(f"{json.dumps(str(k))}: {dumps(v)}" for k, v in obj.items()) + "}"
    if isinstance(obj, np.ndarray):
        return dumps(obj.tolist())
    if isinstance(obj, (list, tuple)):
        return "[" + ", ".join(dumps(v) for v in obj) + "]"
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def write_jsonl(path: str | Path, records: Iterable[dict]) -> int:
    """Write records one per line; returns the number written."""
    path = Path(path)
    count = 0
    try:
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            for record in records:
                f.write(dumps(record))
                f.write("\n")
                count += 1
    except OSError as exc:
        raise DataError(f"cannot write {path}: {exc}") from exc
    return count


def iter_jsonl(path: str | Path) -> Iterator[tuple[int, dict]]:
    """Yield (line number, object); blank lines are skipped."""
    path = Path(path)
    try:
        f = open(path, "r", encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    with f:
        for line_no, line in enumerate(f, start=1):
            text = line.strip()
            if not text:
                continue
            try:
                obj = json.loads(text)
            except json.JSONDecodeError as exc:
                raise RecordFormatError(f"invalid JSON ({exc.msg})", line_no, str(path)) from None
            if not isinstance(obj, dict):
                raise RecordFormatError("expected a JSON object", line_no, str(path))
            yield line_no, obj


def require(obj: dict, key: str, kind: type | tuple[type, ...], line: int, path: str | Path) -> Any:
    """Fetch a typed field or raise a line-numbered error."""
    if key not in obj:
        raise RecordFormatError(f"missing field '{key}'", line, str(path))
    value = obj[key]
    if isinstance(value, bool) or not isinstance(value, kind):
        raise RecordFormatError(f"field '{key}' has the wrong type", line, str(path))
    return value


def require_numbers(obj: dict, key: str, count: int, line: int, path: str | Path) -> list[float]:
    values = require(obj, key, list, line, path)
    if len(values) != count:
        raise RecordFormatError(f"field '{key}' needs {count} values, got {len(values)}", line, str(path))
    if not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in values):
        raise RecordFormatError(f"field '{key}' must hold numbers", line, str(path))
    out = [float(v) for v in values]
    if not all(math.isfinite(v) for v in out):
        raise RecordFormatError(f"field '{key}' has non-finite values", line, str(path))
    return out


# ============================================================================
# Prediction records
# ============================================================================

@dataclass(frozen=True)
class PredictionRecord:
    sample_id: int
    cell: CellPrediction

    def to_dict(self) -> dict:
        return {
            "id": self.sample_id,
            "scale": self.cell.scale,
            "i": self.cell.i,
            "j": self.cell.j,
            "anchor": self.cell.anchor,
            "raw": self.cell.raw.tolist(),
        }


def parse_prediction(obj: dict, line: int, path: str | Path) -> PredictionRecord:
    sample_id = require(obj, "id", int, line, path)
    fields = [require(obj, key, int, line, path) for key in ("scale", "i", "j", "anchor")]
    if any(v < 0 for v in fields):
        raise RecordFormatError("slot indices must be non-negative", line, str(path))
    raw = require_numbers(obj, "raw", VALUES_PER_PREDICTION, line, path)
    return PredictionRecord(sample_id, CellPrediction(*fields, raw=np.array(raw)))


def read_predictions(path: str | Path) -> dict[int, list[CellPrediction]]:
    """Group prediction records by sample id, preserving file order."""
    grouped: dict[int, list[CellPrediction]] = {}
    for line_no, obj in iter_jsonl(path):
        record = parse_prediction(obj, line_no, path)
        grouped.setdefault(record.sample_id, []).append(record.cell)
    LOGGER.debug("Read predictions for %d samples from %s", len(grouped), path)
    return grouped


def write_predictions(path: str | Path, records: Sequence[PredictionRecord]) -> int:
    return write_jsonl(path, (r.to_dict() for r in records))
