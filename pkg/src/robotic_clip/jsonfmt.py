"""JSON helpers: canonical key order and floats at 6 significant digits."""

from __future__ import annotations

import json
import math
from typing import Any


def round_sig(x: float, digits: int = 6) -> float:
    if x == 0 or not math.isfinite(x):
        return x
    return float(f"{x:.{digits}g}")


def _round_floats(obj: Any, digits: int) -> Any:
    if isinstance(obj, bool) or obj is None:
        return obj
    if isinstance(obj, float):
        return round_sig(obj, digits)
    if isinstance(obj, dict):
        return {k: _round_floats(v, digits) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_round_floats(v, digits) for v in obj]
    return obj


def dumps_sig(obj: Any, digits: int = 6, **kwargs) -> str:
    kwargs.setdefault("sort_keys", True)
    kwargs.setdefault("ensure_ascii", False)
    return json.dumps(_round_floats(obj, digits), **kwargs)
