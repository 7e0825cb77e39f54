"""Deterministic JSON/CSV emission with fixed float formatting.

All floats are serialized with 17 significant digits (``%.17g``), which
round-trips IEEE doubles exactly and keeps output files byte-stable across
runs, so golden-file diffs and the determinism acceptance checks work.
"""

from __future__ import annotations

import hashlib
import json
import math

from .errors import FormatError

__all__ = ["dumps", "loads", "sha256_hex", "csv_field"]


def _emit(obj) -> str:
    if obj is None:
        return "null"
    if obj is True:
        return "true"
    if obj is False:
        return "false"
    if isinstance(obj, float):
        if math.isnan(obj) or math.isinf(obj):
            raise FormatError(f"cannot serialize nonfinite float {obj}")
        return format(obj, ".17g")
    if isinstance(obj, int):
        return str(obj)
    if isinstance(obj, str):
        return json.dumps(obj)
    if isinstance(obj, dict):
        items = ",".join(f"{json.dumps(str(k))}:{_emit(v)}" for k, v in obj.items())
        return "{" + items + "}"
    if isinstance(obj, (list, tuple)):
        return "[" + ",".join(_emit(v) for v in obj) + "]"
    # numpy scalars / arrays
    if hasattr(obj, "tolist"):
        return _emit(obj.tolist())
    raise FormatError(f"cannot serialize value of type {type(obj).__name__}")


def dumps(obj) -> str:
    """Serialize to compact JSON with 17-significant-digit floats."""
    return _emit(obj)


def loads(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise FormatError(f"malformed JSON: {exc}") from exc


def sha256_hex(data: bytes | str) -> str:
    if isinstance(data, str):
        data = data.encode("utf-8")
    return hashlib.sha256(data).hexdigest()


def csv_field(value) -> str:
    """RFC-4180 quoting; floats get the same 17-significant-digit format."""
    if value is None:
        return ""
    if isinstance(value, float):
        text = format(value, ".17g")
    else:
        text = str(value)
    if any(c in text for c in ',"\n\r'):
        text = '"' + text.replace('"', '""') + '"'
    return text
