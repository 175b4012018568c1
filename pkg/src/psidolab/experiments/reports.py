"""Deterministic CSV, JSON and gnuplot emitters for sweep reports.

Floats are always written as ``%.12e`` so reruns produce byte-identical files.
"""

from __future__ import annotations

import json
import math
from fractions import Fraction
from pathlib import Path

import numpy as np

CSV_COLUMNS = ("param", "p", "q", "norm_lb", "method", "iterations", "converged", "seed")


class IoFailure(OSError):
    pass


def fmt_float(x) -> str:
    x = float(x)
    if math.isnan(x):
        return "nan"
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    return "%.12e" % x


def _cell(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return fmt_float(v)
    return str(v)


def csv_text(points) -> str:
    lines = [",".join(CSV_COLUMNS)]
    for pt in points:
        lines.append(",".join(_cell(getattr(pt, c)) for c in CSV_COLUMNS))
    return "\n".join(lines) + "\n"


def gnuplot_text(points) -> str:
    lines = ["# " + " ".join(CSV_COLUMNS)]
    for pt in points:
        lines.append(" ".join(_cell(getattr(pt, c)) for c in CSV_COLUMNS))
    return "\n".join(lines) + "\n"


def _encode(obj, indent: int, level: int) -> str:
    pad = " " * (indent * (level + 1))
    end = " " * (indent * level)
    if obj is None:
        return "null"
    if isinstance(obj, (bool, np.bool_)):
        return "true" if obj else "false"
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        s = fmt_float(obj)
        return s if s not in ("nan", "inf", "-inf") else json.dumps(s)
    if isinstance(obj, Fraction):
        return json.dumps(str(obj))
    if isinstance(obj, str):
        return json.dumps(obj)
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = sorted((str(k), v) for k, v in obj.items())
        body = ",\n".join(f"{pad}{json.dumps(k)}: {_encode(v, indent, level + 1)}" for k, v in items)
        return "{\n" + body + "\n" + end + "}"
    if isinstance(obj, (list, tuple, np.ndarray)):
        seq = list(obj)
        if not seq:
            return "[]"
        body = ",\n".join(pad + _encode(v, indent, level + 1) for v in seq)
        return "[\n" + body + "\n" + end + "]"
    return json.dumps(str(obj))


def json_text(report: dict) -> str:
    """Sorted-key JSON with fixed float formatting; Fractions become strings like ``"4/3"``."""
    return _encode(report, 2, 0) + "\n"


def _write(path: Path, text: str) -> Path:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc
    return path


def emit(report: dict, points, out_dir, stem: str = "sweep", formats=("json", "csv", "gnuplot")) -> list:
    """Write ``report.json``, ``<stem>.csv`` and ``<stem>.dat`` into ``out_dir``."""
    out = Path(out_dir)
    written = []
    if "json" in formats:
        written.append(_write(out / "report.json", json_text(report)))
    if "csv" in formats:
        written.append(_write(out / f"{stem}.csv", csv_text(points)))
    if "gnuplot" in formats:
        written.append(_write(out / f"{stem}.dat", gnuplot_text(points)))
    return written
