"""Report serialization: JSON with 17 significant digits, CSV matrices."""
from __future__ import annotations

import math
from pathlib import Path

import numpy as np

SCHEMA_TAG = "report-v1"


def _num(x: float) -> str:
    if not math.isfinite(x):
        return "null"
    s = format(x, ".17g")
    # keep integers-valued floats recognisably floating
    if all(c not in s for c in ".eEn"):
        s += ".0"
    return s


def _key(k) -> str:
    if isinstance(k, tuple):
        return ",".join(str(int(x)) for x in k)
    return str(k)


def _encode(obj, indent: int, level: int, out: list):
    pad = " " * (indent * (level + 1))
    end = " " * (indent * level)
    if obj is None:
        out.append("null")
    elif isinstance(obj, (bool, np.bool_)):
        out.append("true" if obj else "false")
    elif isinstance(obj, (int, np.integer)):
        out.append(str(int(obj)))
    elif isinstance(obj, (float, np.floating)):
        out.append(_num(float(obj)))
    elif isinstance(obj, (complex, np.complexfloating)):
        _encode([obj.real, obj.imag], indent, level, out)
    elif isinstance(obj, str):
        out.append(_string(obj))
    elif isinstance(obj, dict):
        if not obj:
            out.append("{}")
            return
        out.append("{\n")
        items = list(obj.items())
        for i, (k, v) in enumerate(items):
            out.append(f"{pad}{_string(_key(k))}: ")
            _encode(v, indent, level + 1, out)
            out.append(",\n" if i < len(items) - 1 else "\n")
        out.append(end + "}")
    elif isinstance(obj, (list, tuple, np.ndarray)):
        seq = obj.tolist() if isinstance(obj, np.ndarray) else list(obj)
        if not seq:
            out.append("[]")
            return
        if all(isinstance(v, (int, float, bool, type(None), np.number)) for v in seq):
            parts: list[str] = []
            for v in seq:
                _encode(v, indent, level + 1, parts)
                parts.append(", ")
            out.append("[" + "".join(parts[:-1]) + "]")
            return
        out.append("[\n")
        for i, v in enumerate(seq):
            out.append(pad)
            _encode(v, indent, level + 1, out)
            out.append(",\n" if i < len(seq) - 1 else "\n")
        out.append(end + "]")
    elif hasattr(obj, "to_dict"):
        _encode(obj.to_dict(), indent, level, out)
    else:
        raise TypeError(f"cannot serialize {type(obj).__name__}")


def _string(s: str) -> str:
    import json
    return json.dumps(s)


def dumps(obj, indent: int = 2) -> str:
    out: list[str] = []
    _encode(obj, indent, 0, out)
    return "".join(out) + "\n"


def write_json(path, obj) -> None:
    Path(path).write_text(dumps(obj))


def format_complex(z: complex) -> str:
    return f"{z.real:.17g}{z.imag:+.17g}j"


def write_matrix_csv(path, m: np.ndarray, header: list[str] | None = None) -> None:
    m = np.asarray(m)
    lines = []
    if header is not None:
        lines.append(",".join(header))
    for row in m:
        lines.append(",".join(format_complex(complex(z)) for z in row))
    Path(path).write_text("\n".join(lines) + "\n")


def read_matrix_csv(path, header: bool = False) -> np.ndarray:
    rows = Path(path).read_text().strip().splitlines()
    if header:
        rows = rows[1:]
    return np.array([[complex(x) for x in r.split(",")] for r in rows])
