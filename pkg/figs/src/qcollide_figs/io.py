"""Schema-checked readers for the simulator's CSV and NDJSON outputs.

These scripts never recompute physics; they only parse the files the
simulator CLI emitted. A missing column or record key raises SchemaError
naming it, so a mismatched input fails loudly instead of plotting garbage.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np


class SchemaError(ValueError):
    """An input file does not match the expected column/key schema."""


def read_csv_columns(path, required: tuple) -> dict:
    """Read a CSV into {column: float array}, requiring the named columns."""
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        for col in required:
            if col not in header:
                raise SchemaError(f"{path.name}: missing column {col!r}")
        rows = list(reader)
    out = {}
    for col in header:
        out[col] = np.array([float(r[col]) for r in rows], dtype=float)
    return out


def read_histogram(path):
    """(bin_left, bin_right, count) columns of a counting histogram."""
    cols = read_csv_columns(path, ("bin_left", "bin_right", "count"))
    return cols["bin_left"], cols["bin_right"], cols["count"]


def read_ensemble(path, observable: str):
    """(time, mean, stderr) for one observable of an ensemble CSV."""
    cols = read_csv_columns(
        path, ("time", f"mean_{observable}", f"stderr_{observable}")
    )
    return cols["time"], cols[f"mean_{observable}"], cols[f"stderr_{observable}"]


def read_compare(path):
    """Paired collision/oracle columns of a compare CSV."""
    cols = read_csv_columns(
        path, ("time", "collision_mean_n", "collision_stderr_n", "z_n")
    )
    oracle_col = "oracle_n" if "oracle_n" in cols else "oracle_mean_n"
    if oracle_col not in cols:
        raise SchemaError(f"{Path(path).name}: missing column 'oracle_n'")
    return (cols["time"], cols["collision_mean_n"], cols["collision_stderr_n"],
            cols[oracle_col], cols["z_n"])


def read_trajectory(path, observable: str):
    """(time, observable series) from a per-trajectory NDJSON record file."""
    path = Path(path)
    times, values = [], []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise SchemaError(f"{path.name}:{lineno}: not valid JSON") from exc
            for key in ("time", "observables"):
                if key not in rec:
                    raise SchemaError(f"{path.name}:{lineno}: missing key {key!r}")
            if observable not in rec["observables"]:
                raise SchemaError(
                    f"{path.name}:{lineno}: missing observable {observable!r}"
                )
            times.append(float(rec["time"]))
            values.append(float(rec["observables"][observable]))
    return np.asarray(times), np.asarray(values)
