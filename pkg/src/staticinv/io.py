"""
File formats: poses JSON, moduli/ground-truth/metadata JSON, history and
validation CSV. Every writer goes through a temp file and ``os.replace``.
"""

from __future__ import annotations

import csv
import io
import json
import os

import numpy as np

from .mesh import MeshError, PoseObservation

__all__ = [
    "FORMAT_VERSION",
    "HISTORY_COLUMNS",
    "atomic_write",
    "write_json",
    "read_json",
    "write_poses",
    "read_poses",
    "write_history_csv",
    "read_history_csv",
    "write_validation_csv",
]

FORMAT_VERSION = "1"

HISTORY_COLUMNS = ["phase", "iter", "objective", "data_term", "reg_term", "grad_norm", "step", "min_volume"]


def atomic_write(path, text: str) -> None:
    tmp = f"{path}.tmp{os.getpid()}"
    with open(tmp, "w", newline="") as fh:
        fh.write(text)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


def _default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, np.generic):
        return o.item()
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


def write_json(path, obj) -> None:
    atomic_write(path, json.dumps(obj, indent=2, default=_default) + "\n")


def read_json(path):
    with open(path) as fh:
        return json.load(fh)


def write_poses(path, poses) -> None:
    """Top-level list of ``{gravity, observed, targets}`` objects."""
    write_json(path, [{"gravity": p.gravity, "observed": p.observed_ids, "targets": p.targets}
                      for p in poses])


def read_poses(path) -> list:
    data = read_json(path)
    if not isinstance(data, list):
        raise MeshError(f"{path}: poses file must hold a top-level list")
    poses = []
    for k, entry in enumerate(data):
        try:
            poses.append(PoseObservation(entry["gravity"], entry["observed"], entry["targets"]))
        except KeyError as exc:
            raise MeshError(f"{path}: pose {k} lacks key {exc}") from None
        except (TypeError, ValueError) as exc:
            raise MeshError(f"{path}: pose {k}: {exc}") from None
    return poses


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_history_csv(path, history, num_clusters) -> None:
    """One row per accepted iterate; columns ``HISTORY_COLUMNS`` then ``E_0..E_{c-1}``."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(HISTORY_COLUMNS + [f"E_{i}" for i in range(num_clusters)])
    for h in history:
        w.writerow([h.phase, h.iter] + [_fmt(float(v)) for v in
                                        (h.objective, h.data_term, h.reg_term, h.grad_norm, h.step,
                                         h.min_volume)]
                   + [_fmt(float(e)) for e in h.cluster_E])
    atomic_write(path, buf.getvalue())


def read_history_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        for k, v in r.items():
            if k == "phase":
                continue
            r[k] = int(v) if k == "iter" else float(v)
    return rows


def write_validation_csv(path, reports: dict) -> None:
    """Rows per (model, pose) plus an aggregate row per model.

    ``reports`` maps a model name (e.g. ``"inverted"``, ``"naive"``) to a
    :class:`~staticinv.inverse.ValidationReport`.
    """
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["model", "pose", "total_error", "mean_vertex_error"])
    for name, rep in reports.items():
        for pose, tot, mean in zip(rep.names, rep.total_error, rep.mean_vertex_error):
            w.writerow([name, pose, _fmt(tot), _fmt(mean)])
        w.writerow([name, "aggregate", _fmt(rep.aggregate_total), _fmt(rep.aggregate_mean)])
    atomic_write(path, buf.getvalue())
