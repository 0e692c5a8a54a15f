"""Report figures (PNG via matplotlib) and delimited data files.

The pipeline's report path drops these next to the JSON report: a closed
loop trajectory overview, per-state derivative-fit overlays, and the
verification overlay, each as a PNG plus a CSV with the plotted numbers
(and an SVG twin rendered by :mod:`kansid.svgplot`).
"""

from __future__ import annotations

import os
import tempfile

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .svgplot import emit_plot

_FIG_POINTS = 4000


def _thin(*arrays):
    n = arrays[0].size
    if n <= _FIG_POINTS:
        return arrays
    stride = -(-n // _FIG_POINTS)
    keep = np.arange(0, n, stride)
    if keep[-1] != n - 1:
        keep = np.append(keep, n - 1)
    return tuple(a[keep] for a in arrays)


def _atomic(path, write_fn, suffix):
    target = os.fspath(path)
    directory = os.path.dirname(target) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=suffix)
    os.close(fd)
    try:
        write_fn(tmp)
        os.replace(tmp, target)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_series_csv(path, columns: dict) -> None:
    """Write named columns of equal length as comma-separated values."""
    names = list(columns)
    arrays = [np.asarray(columns[k], dtype=float).ravel() for k in names]
    n = arrays[0].size
    if any(a.size != n for a in arrays):
        raise ValueError("columns have unequal lengths")

    def write(tmp):
        with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(",".join(names) + "\n")
            for row in zip(*arrays):
                fh.write(",".join(repr(float(v)) for v in row) + "\n")

    _atomic(path, write, ".csv.tmp")


def save_line_png(path, title, xlabel, ylabel, series,
                  annotation: str | None = None) -> None:
    """Small wrapper over matplotlib for consistent report figures."""

    def write(tmp):
        fig, ax = plt.subplots(figsize=(9.6, 4.8), dpi=100)
        for label, xs, ys in series:
            xa, ya = _thin(np.asarray(xs, float).ravel(),
                           np.asarray(ys, float).ravel())
            ax.plot(xa, ya, linewidth=1.2, label=str(label))
        ax.set_title(title)
        ax.set_xlabel(xlabel)
        ax.set_ylabel(ylabel)
        ax.grid(True, alpha=0.3)
        ax.legend(loc="best")
        if annotation:
            ax.text(0.02, 0.96, annotation, transform=ax.transAxes,
                    va="top", fontsize=9,
                    bbox={"boxstyle": "round", "fc": "white", "alpha": 0.7})
        fig.tight_layout()
        fig.savefig(tmp, format="png")
        plt.close(fig)

    _atomic(path, write, ".png.tmp")


def render_report_outputs(result, out_dir) -> list[str]:
    """Render every figure/CSV for a pipeline result; returns paths."""
    os.makedirs(out_dir, exist_ok=True)
    written = []

    def dest(name):
        p = os.path.join(os.fspath(out_dir), name)
        written.append(p)
        return p

    traj = result.training_trajectory
    save_line_png(dest("training_trajectory.png"),
                  "Closed-loop training run", "time [s]", "signal",
                  [("v_out [V]", traj.time, traj.v_out),
                   ("i_L [A]", traj.time, traj.i_l)])
    emit_plot("trajectory",
              [("v_out [V]", traj.time, traj.v_out),
               ("i_L [A]", traj.time, traj.i_l)],
              dest("training_trajectory.svg"))
    write_series_csv(dest("training_trajectory.csv"),
                     {"t": traj.time, "i_L": traj.i_l, "v_C": traj.v_c,
                      "v_out": traj.v_out, "duty": traj.duty})

    for state in result.states:
        n = state.targets.size
        idx = np.arange(n, dtype=float)
        tag = state.state_label.replace("_", "").lower()
        series = [("finite difference", idx, state.targets),
                  ("network", idx, state.predictions)]
        save_line_png(dest(f"fit_{tag}.png"),
                      f"Per-sample difference fit: {state.state_label}",
                      "sample", "per-sample difference", series)
        emit_plot("derivative_fit", series, dest(f"fit_{tag}.svg"))
        write_series_csv(dest(f"fit_{tag}.csv"),
                         {"sample": idx, "target": state.targets,
                          "prediction": state.predictions})

    for ver in result.verifications:
        if ver.predicted is None:
            continue
        src = (result.validation_trajectory
               if ver.trajectory_source == "validation"
               else result.training_trajectory)
        tag = ver.trajectory_source
        note = f"RMSE = {ver.rmse:.6g} V"
        series = [("plant", src.time, src.v_c),
                  ("identified model", src.time, ver.predicted)]
        save_line_png(dest(f"verification_{tag}.png"),
                      f"Output replay ({tag} schedule)", "time [s]",
                      "output voltage [V]", series, annotation=note)
        emit_plot("verification", series, dest(f"verification_{tag}.svg"),
                  annotation=note)
        write_series_csv(dest(f"verification_{tag}.csv"),
                         {"t": src.time, "actual": src.v_c,
                          "predicted": ver.predicted})
    return written
