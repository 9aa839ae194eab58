"""Deterministic text output: CSV/JSON numbers at 17 significant digits."""

from __future__ import annotations

import json
import math
import re

import numpy as np

_TOKEN = "\x00F"
_PATTERN = re.compile(r'"\\u0000F([^"]*)"')


def fmt(x: float) -> str:
    return format(float(x), ".17g")


def _prepare(obj):
    if isinstance(obj, dict):
        return {str(k): _prepare(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_prepare(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _prepare(obj.tolist())
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        if not math.isfinite(obj):
            return None
        return _TOKEN + fmt(obj)
    return obj


def dumps(obj, indent: int | None = 2) -> str:
    """``json.dumps`` with every float written as ``%.17g``; non-finite
    floats become ``null``."""
    text = json.dumps(_prepare(obj), indent=indent, sort_keys=False)
    return _PATTERN.sub(lambda m: m.group(1), text)


def write_json(obj, path) -> None:
    with open(path, "w", newline="\n") as fh:
        fh.write(dumps(obj))
        fh.write("\n")
