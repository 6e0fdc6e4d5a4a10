"""Canonical CSV files.

Traces use the header ``time_s,current_a,voltage_v,temp_c``: decimal
floats written with ``repr`` (round-trips bit-exactly), UTF-8, LF line
endings, positive current = discharge.  An unknown voltage is written as
``nan``.
"""

from __future__ import annotations

import csv
from pathlib import Path
from typing import Sequence

import numpy as np

from .core import Trace

TRACE_HEADER = ("time_s", "current_a", "voltage_v", "temp_c")


def write_columns(path, header: Sequence[str], columns: Sequence[np.ndarray]) -> None:
    cols = [np.asarray(c).tolist() for c in columns]
    lines = [",".join(header)]
    lines.extend(",".join(repr(float(v)) for v in row) for row in zip(*cols))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8", newline="\n")


def read_columns(path) -> dict[str, np.ndarray]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = [h.strip() for h in next(reader)]
        rows = [r for r in reader if r]
    data = np.array(rows, dtype=float).reshape(len(rows), len(header))
    return {name: data[:, j] for j, name in enumerate(header)}


def write_trace(trace: Trace, path) -> None:
    write_columns(path, TRACE_HEADER,
                  [trace.time_s, trace.current_a, trace.voltage_v, trace.temp_c])


def read_trace(path, **meta) -> Trace:
    """Load a trace CSV; irregular time stamps are resampled linearly."""
    cols = read_columns(path)
    missing = {"time_s", "current_a"} - cols.keys()
    if missing:
        raise ValueError(f"{path}: missing columns {sorted(missing)}")
    meta = {"source": str(path), **meta}
    try:
        return Trace(cols["time_s"], cols["current_a"], cols.get("voltage_v"),
                     cols.get("temp_c"), meta)
    except ValueError as exc:
        if "non-uniform" not in str(exc):
            raise
        return Trace.resampled(cols["time_s"], cols["current_a"], cols.get("voltage_v"),
                               cols.get("temp_c"), meta=dict(meta, resampled=True))
