"""Byte-stable JSON writing.

Reports must be reproducible byte-for-byte for a fixed seed, so floats
are always rendered with 17 significant digits (enough to round-trip an
IEEE double exactly) instead of whatever the interpreter's repr picks.
"""

from __future__ import annotations

import math


def _format_float(x: float) -> str:
    if math.isnan(x):
        return "NaN"
    if math.isinf(x):
        return "Infinity" if x > 0 else "-Infinity"
    return format(float(x), ".17g")


def dumps(obj, indent: int = 0) -> str:
    pad = "  " * indent
    inner = "  " * (indent + 1)
    if obj is None:
        return "null"
    if obj is True:
        return "true"
    if obj is False:
        return "false"
    if isinstance(obj, str):
        import json as _json
        return _json.dumps(obj)
    if isinstance(obj, int):
        return str(obj)
    if isinstance(obj, float):
        return _format_float(obj)
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = ",\n".join(
            f"{inner}{dumps(str(k))}: {dumps(v, indent + 1)}"
            for k, v in obj.items())
        return "{\n" + items + f"\n{pad}}}"
    if isinstance(obj, (list, tuple)):
        if not obj:
            return "[]"
        items = ",\n".join(f"{inner}{dumps(v, indent + 1)}" for v in obj)
        return "[\n" + items + f"\n{pad}]"
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def dump(obj, path) -> None:
    with open(path, "w") as fh:
        fh.write(dumps(obj))
        fh.write("\n")
