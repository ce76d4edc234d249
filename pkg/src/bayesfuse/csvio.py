"""Deterministic CSV writing/reading.

Floats are rendered with repr() of the python float (shortest roundtrip
form), rows end with a bare newline, and no environment-dependent state is
consulted, so rerunning a pipeline reproduces files byte for byte.
"""

from __future__ import annotations

import csv
from pathlib import Path


def fmt_cell(v) -> str:
    if isinstance(v, float):
        return repr(v)
    if hasattr(v, "dtype"):  # numpy scalar
        return repr(float(v)) if v.dtype.kind == "f" else str(int(v))
    return str(v)


def write_csv(path, header: list[str], rows) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([fmt_cell(v) for v in row])


def read_csv(path) -> tuple[list[str], list[list[str]]]:
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader)
        return header, [row for row in reader]
