"""CSV trace files with an optional ``#``-comment header."""

from __future__ import annotations

import csv
from pathlib import Path


class TraceWriter:
    """Append rows to a CSV file, flushing after each one.

    Comment lines are written before the column header so partially
    finished runs remain self-describing.
    """

    def __init__(self, path, columns, comments=()):
        self.path = Path(path)
        self.columns = list(columns)
        self._fh = open(self.path, "w", newline="", encoding="utf-8")
        for line in comments:
            self._fh.write(f"# {line}\n")
        self._writer = csv.DictWriter(self._fh, fieldnames=self.columns, extrasaction="ignore")
        self._writer.writeheader()
        self._fh.flush()

    def write(self, row):
        self._writer.writerow({k: _fmt(row[k]) for k in self.columns})
        self._fh.flush()

    def close(self):
        if not self._fh.closed:
            self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return v


def read_trace(path):
    """Load a trace written by :class:`TraceWriter` as a list of dicts of floats."""
    with open(path, encoding="utf-8") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    reader = csv.DictReader(lines)
    out = []
    for row in reader:
        parsed = {}
        for k, v in row.items():
            try:
                parsed[k] = float(v)
            except ValueError:
                parsed[k] = v
        out.append(parsed)
    return out
