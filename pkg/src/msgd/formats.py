"""CSV and JSON readers/writers for datasets, covariances and result tables.

Floats are written with ``repr`` so values round-trip exactly and reruns are
byte-identical.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from msgd.models import Dataset


def _cell(v):
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v)).lower()
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if v is None:
        return ""
    return str(v)


def write_csv(path, columns, rows) -> Path:
    """``rows`` are mappings keyed by ``columns``; extra keys are an error."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            extra = set(row) - set(columns)
            if extra:
                raise KeyError(f"row has columns {sorted(extra)} not in the schema")
            writer.writerow([_cell(row.get(c)) for c in columns])
    return path


def read_csv(path) -> list[dict]:
    with Path(path).open(newline="") as fh:
        return list(csv.DictReader(fh))


def write_json(path, obj) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n")
    return path


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, np.generic):
        return o.item()
    raise TypeError(f"cannot serialize {type(o).__name__}")


def write_dataset(path, data: Dataset) -> Path:
    p = data.X.shape[1]
    columns = [f"x_{j}" for j in range(p)] + ["y"]
    rows = ({**{f"x_{j}": x[j] for j in range(p)}, "y": y} for x, y in zip(data.X, data.y))
    return write_csv(path, columns, rows)


def read_dataset(path) -> Dataset:
    with Path(path).open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        body = np.array([[float(c) for c in row] for row in reader], dtype=float)
    p = len(header) - 1
    if header != [f"x_{j}" for j in range(p)] + ["y"]:
        raise ValueError(f"unexpected dataset header {header}")
    body = body.reshape(-1, p + 1)
    return Dataset(body[:, :p], body[:, p])


def write_covariance(path, C) -> Path:
    C = np.atleast_2d(np.asarray(C, dtype=float))
    rows = ({"i": i, "j": j, "value": C[i, j]} for i in range(C.shape[0]) for j in range(C.shape[1]))
    return write_csv(path, ("i", "j", "value"), rows)


def read_covariance(path) -> np.ndarray:
    rows = read_csv(path)
    d = 1 + max(int(r["i"]) for r in rows)
    C = np.zeros((d, d))
    for r in rows:
        C[int(r["i"]), int(r["j"])] = float(r["value"])
    return C
