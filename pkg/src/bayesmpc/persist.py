"""Atomic file output and the CSV schemas shared with the plot tooling.

Every file is written to a temporary sibling and renamed into place, so a
crashed run never leaves a truncated artifact.  Floats carry 17 significant
digits, which round-trips IEEE doubles exactly; given a fixed seed, repeated
runs produce byte-identical CSVs.  Column layouts are documented in
FORMATS.md at the repository root.
"""

from __future__ import annotations

import csv
import io
import json
import os
import tempfile
from pathlib import Path

import numpy as np

from bayesmpc.loop import ClosedLoopRecord, HorizonSnapshot
from bayesmpc.models import SystemModel

__all__ = [
    "fmt_float",
    "atomic_write_text",
    "write_csv",
    "write_json",
    "read_csv_columns",
    "trajectory_table",
    "horizon_table",
    "solver_trace_table",
]


def fmt_float(x) -> str:
    return "%.17g" % float(x)


def atomic_write_text(path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _render_cell(value) -> str:
    if isinstance(value, bool) or isinstance(value, np.bool_):
        return "1" if value else "0"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return fmt_float(value)
    return str(value)


def write_csv(path, header: list[str], rows) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([_render_cell(v) for v in row])
    atomic_write_text(path, buf.getvalue())


def write_json(path, obj) -> None:
    atomic_write_text(path, json.dumps(obj, indent=2) + "\n")


def read_csv_columns(path) -> dict[str, np.ndarray]:
    """Read a numeric CSV written by this module into named float columns."""
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = [row for row in reader]
    data = np.array(rows, dtype=float) if rows else np.zeros((0, len(header)))
    return {name: data[:, i] for i, name in enumerate(header)}


# -- tables -------------------------------------------------------------------

def trajectory_table(records: list[ClosedLoopRecord], model: SystemModel):
    """(header, rows) for trajectory.csv: one row per closed-loop step.

    Wall-clock timings are deliberately kept out of this file (they live in
    diagnostics.json) so identical seeds give identical bytes.
    """
    header = ["t"]
    header += [f"x_true_{d}" for d in range(model.n_x)]
    header += [f"y_{d}" for d in range(model.n_y)]
    header += [f"u_{d}" for d in range(model.n_u)]
    header += [f"x_mean_{d}" for d in range(model.n_x)]
    header += [f"x_std_{d}" for d in range(model.n_x)]
    for name in model.param_names:
        header += [f"mean_{name}", f"std_{name}"]
    header += ["eps", "solver_converged", "solver_iters",
               "max_rhat", "min_ess", "mean_accept", "divergences"]

    rows = []
    for rec in records:
        row = [rec.t, *rec.x_true, *rec.y, *rec.u_applied,
               *rec.x_post_mean, *rec.x_post_std]
        for i in range(model.n_theta):
            row += [rec.theta_post_mean[i], rec.theta_post_std[i]]
        row += [rec.eps, rec.solver_converged, rec.solver_iters,
                rec.max_rhat, rec.min_ess, rec.mean_accept, rec.divergences]
        rows.append(row)
    return header, rows


def horizon_table(snapshot: HorizonSnapshot, model: SystemModel):
    """(header, rows) for horizon_t<k>.csv: one row per horizon step with
    the optimised input and the rollout quantiles per state dimension."""
    levels = [f"q{int(round(100 * lv)):02d}" for lv in snapshot.levels]
    header = ["step"]
    header += [f"u_{d}" for d in range(model.n_u)]
    for d in range(model.n_x):
        header += [f"{lv}_x{d}" for lv in levels]
    rows = []
    n_steps = snapshot.quantiles.shape[1]
    for k in range(n_steps):
        row = [k + 1, *snapshot.u_seq[k]]
        for d in range(model.n_x):
            row += list(snapshot.quantiles[:, k, d])
        rows.append(row)
    return header, rows


def solver_trace_table(traces: dict[int, list]):
    """(header, rows) for solver_trace.csv: continuation iterations of every
    solved step, tagged by the closed-loop time index."""
    header = ["t", "iteration", "mu", "gamma", "cost", "abs_pg", "alpha", "eps"]
    rows = []
    for t in sorted(traces):
        for tr in traces[t]:
            rows.append([t, *tr.as_tuple()])
    return header, rows
