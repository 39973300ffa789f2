"""JSON writing with lossless float formatting.

Every float is printed with 17 significant digits so that a save/load
round trip reproduces the exact float64 bit pattern.  Key order is the
insertion order of the dicts passed in, which keeps repeated runs
byte-identical.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np


def format_float(x: float) -> str:
    """Render a float with 17 significant digits (round-trip exact)."""
    if np.isnan(x):
        return "NaN"
    if np.isinf(x):
        return "Infinity" if x > 0 else "-Infinity"
    return format(float(x), ".17g")


def dumps(obj) -> str:
    """Serialize nested dicts/lists/scalars to a compact JSON string."""
    parts: list[str] = []
    _write(obj, parts)
    return "".join(parts)


def dump(obj, path: str | Path) -> None:
    Path(path).write_text(dumps(obj) + "\n", encoding="utf-8")


def load(path: str | Path):
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def _write(obj, parts: list[str]) -> None:
    if obj is None:
        parts.append("null")
    elif isinstance(obj, (bool, np.bool_)):
        parts.append("true" if obj else "false")
    elif isinstance(obj, (int, np.integer)):
        parts.append(str(int(obj)))
    elif isinstance(obj, (float, np.floating)):
        parts.append(format_float(float(obj)))
    elif isinstance(obj, str):
        parts.append(json.dumps(obj))
    elif isinstance(obj, np.ndarray):
        _write(obj.tolist(), parts)
    elif isinstance(obj, dict):
        parts.append("{")
        for i, (key, value) in enumerate(obj.items()):
            if i:
                parts.append(",")
            parts.append(json.dumps(str(key)))
            parts.append(":")
            _write(value, parts)
        parts.append("}")
    elif isinstance(obj, (list, tuple)):
        parts.append("[")
        for i, value in enumerate(obj):
            if i:
                parts.append(",")
            _write(value, parts)
        parts.append("]")
    else:
        raise TypeError(f"cannot serialize {type(obj).__name__}")
