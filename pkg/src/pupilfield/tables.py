"""Deterministic CSV writing and reading shared by the result tables."""

from __future__ import annotations

import csv
import io
import math
from pathlib import Path


def fmt(value) -> str:
    """Shortest round-trip text for a cell."""
    if isinstance(value, bool):
        return "1" if value else "0"
    if isinstance(value, float):
        if math.isnan(value):
            return "nan"
        if math.isinf(value):
            return "inf" if value > 0 else "-inf"
        return repr(float(value) + 0.0)  # no negative zero
    if isinstance(value, (tuple, list)):
        return ";".join(str(v) for v in value)
    if hasattr(value, "item"):  # numpy scalar
        return fmt(value.item())
    return str(value)


def dumps_csv(header, rows, comments=()) -> str:
    buf = io.StringIO()
    for line in comments:
        buf.write(f"# {line}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([fmt(v) for v in row])
    return buf.getvalue()


def write_csv(path, header, rows, comments=()):
    Path(path).write_text(dumps_csv(header, rows, comments))


def read_csv(path_or_text, from_text=False):
    """Return ``(comments, header, rows)`` with rows as lists of strings."""
    text = path_or_text if from_text else Path(path_or_text).read_text()
    comments = []
    body = []
    for line in text.splitlines():
        if line.startswith("#") and not body:
            comments.append(line[1:].strip())
        else:
            body.append(line)
    rows = list(csv.reader(body))
    if not rows:
        return comments, [], []
    return comments, rows[0], rows[1:]


def parse_float(text: str) -> float:
    return float(text)


def parse_flags(text: str) -> tuple[str, ...]:
    return tuple(t for t in text.split(";") if t)
