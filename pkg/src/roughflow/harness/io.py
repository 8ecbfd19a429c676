"""Deterministic CSV/JSON serialisation.

Floats are written with 17 significant digits and JSON keys are sorted, so a
re-run with the same inputs produces byte-identical files.
"""
from __future__ import annotations

import csv
import hashlib
import json
import math
from pathlib import Path

import numpy as np

from ..foliated import FoliatedTrajectory
from ..rde_solver import Trajectory
from ..tensor_algebra import GridRoughPath

SCHEMA_VERSION = "1.0"
SCHEMA_DIR = Path(__file__).resolve().parents[3] / "docs" / "schemas"


def fmt(x: float) -> str:
    return f"{float(x):.17g}"


def _plain(obj):
    """Convert numpy scalars/arrays and non-finite floats into JSON-safe values."""
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer, int)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else None
    return obj


def dumps(obj) -> str:
    return json.dumps(_plain(obj), sort_keys=True, indent=2, allow_nan=False) + "\n"


def write_json(obj, dest) -> Path:
    dest = Path(dest)
    dest.write_text(dumps(obj), encoding="utf-8")
    return dest


def write_csv(header, rows, dest) -> Path:
    dest = Path(dest)
    with dest.open("w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(header)
        for row in rows:
            wr.writerow([v if isinstance(v, str) else (str(v) if isinstance(v, (int, np.integer)) else fmt(v))
                         for v in row])
    return dest


def rough_path_dict(path: GridRoughPath) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "kind": "grid_rough_path",
        "alpha": path.alpha,
        "geometric": path.geometric,
        "dim": path.dim,
        "times": [fmt(t) for t in path.times],
        "level1": [[fmt(v) for v in row] for row in path.level1],
        "level2": [[[fmt(v) for v in r] for r in cell] for cell in path.level2],
        "cell_kind": list(path.cell_kind),
    }


def rough_path_from_dict(obj: dict) -> GridRoughPath:
    n = len(obj["times"]) - 1
    d = int(obj["dim"])
    return GridRoughPath(
        times=np.array([float(t) for t in obj["times"]]),
        level1=np.array([[float(v) for v in row] for row in obj["level1"]]).reshape(n, d),
        level2=np.array([[[float(v) for v in r] for r in c] for c in obj["level2"]]).reshape(n, d, d),
        cell_kind=tuple(obj["cell_kind"]),
        alpha=float(obj["alpha"]),
        geometric=bool(obj["geometric"]),
    )


def driver_hash(path: GridRoughPath) -> str:
    """SHA-256 of the canonical JSON of the driver."""
    return hashlib.sha256(dumps(rough_path_dict(path)).encode("utf-8")).hexdigest()


def trajectory_rows(traj: Trajectory, with_jacobians: bool = False):
    p = traj.states.shape[-1]
    header = ["t"] + [f"x{k + 1}" for k in range(p)]
    if with_jacobians and traj.J1 is not None:
        header += [f"J{a + 1}{b + 1}" for a in range(p) for b in range(p)]
    rows = []
    for k, t in enumerate(traj.times):
        row = [t, *traj.states[k]]
        if with_jacobians and traj.J1 is not None:
            row += list(traj.J1[k].ravel())
        rows.append(row)
    return header, rows


def write_trajectory_csv(traj: Trajectory, dest, with_jacobians: bool = False) -> Path:
    if traj.states.ndim != 2:
        raise ValueError("write one trajectory at a time")
    header, rows = trajectory_rows(traj, with_jacobians)
    return write_csv(header, rows, dest)


def write_foliated_csv(traj: FoliatedTrajectory, dest) -> Path:
    T = traj.space.transversal
    p = traj.y.shape[1]
    header = ["t"] + [f"y{k + 1}" for k in range(p)] + ["z_repr", "winding"]
    rows = [[t, *traj.y[k], T.label(traj.z[k]), int(traj.winding[k])] for k, t in enumerate(traj.times)]
    return write_csv(header, rows, dest)


def load_schema(name: str) -> dict:
    return json.loads((SCHEMA_DIR / f"{name}.schema.json").read_text(encoding="utf-8"))


def validate(obj, name: str) -> None:
    """Validate ``obj`` against the shipped schema ``name``; raises ``jsonschema.ValidationError``."""
    import jsonschema

    jsonschema.validate(_plain(obj), load_schema(name))
