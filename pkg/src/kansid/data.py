"""Trajectory container, finite differencing, and dataset assembly.

Targets are per-sample finite differences of the recorded state columns.
They are deliberately not divided by the sample period: the network learns
``Ts * x_dot`` and the extracted equation is rescaled by ``1/Ts`` at the
end. ``literal`` mode keeps raw central differences (interior values span
two sample periods); ``consistent`` mode halves the interior values so
every target estimates the same quantity.
"""

from __future__ import annotations

import csv
import io
import os
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateDataError
from .util import atomic_write_text

TRAJECTORY_COLUMNS = ("t", "i_L", "v_C", "v_out", "duty", "v_in")
STATE_LABELS = ("i_L", "v_C")
INPUT_LABELS = ("i_L", "v_C", "D")
DIFF_MODES = ("literal", "consistent")

_TIME_JITTER_TOL = 1e-9  # seconds


@dataclass
class Trajectory:
    """Uniformly sampled closed-loop recording."""

    ts_seconds: float
    time: np.ndarray
    i_l: np.ndarray
    v_c: np.ndarray
    v_out: np.ndarray
    duty: np.ndarray
    v_in: np.ndarray

    def __post_init__(self):
        cols = (self.time, self.i_l, self.v_c, self.v_out, self.duty,
                self.v_in)
        n = self.time.size
        if n < 2:
            raise ValueError("trajectory needs at least 2 rows")
        if any(c.shape != (n,) for c in cols):
            raise ValueError("trajectory columns have mismatched lengths")
        if self.ts_seconds <= 0:
            raise ValueError(f"sample period must be > 0, got "
                             f"{self.ts_seconds}")
        dt = np.diff(self.time)
        if np.any(np.abs(dt - self.ts_seconds) > _TIME_JITTER_TOL):
            worst = int(np.argmax(np.abs(dt - self.ts_seconds)))
            raise ValueError(
                f"time column is not uniform at row {worst + 1}: "
                f"step {dt[worst]!r} vs period {self.ts_seconds!r}")
        if np.any((self.duty < 0) | (self.duty > 1)):
            raise ValueError("duty column leaves [0, 1]")

    def __len__(self) -> int:
        return self.time.size

    def state_column(self, label: str) -> np.ndarray:
        if label == "i_L":
            return self.i_l
        if label == "v_C":
            return self.v_c
        raise ValueError(
            f"unknown state '{label}'; states are {list(STATE_LABELS)}")


def finite_diff(series, mode: str = "consistent") -> np.ndarray:
    """Per-sample differences without the 1/dt division.

    First row: forward difference. Last row: backward difference. Interior:
    central difference, halved in ``consistent`` mode so all rows scale as
    one sample period.
    """
    y = np.asarray(series, dtype=float)
    if y.ndim != 1:
        raise ValueError("series must be one-dimensional")
    if y.size < 2:
        raise ValueError("need at least 2 samples to difference")
    if mode not in DIFF_MODES:
        raise ValueError(f"unknown diff mode '{mode}'; use one of "
                         f"{list(DIFF_MODES)}")
    out = np.empty_like(y)
    out[0] = y[1] - y[0]
    out[-1] = y[-1] - y[-2]
    if y.size > 2:
        central = y[2:] - y[:-2]
        out[1:-1] = central / 2.0 if mode == "consistent" else central
    return out


@dataclass
class SidDataset:
    """Inputs (i_L, v_C, D) against one state's finite-difference target."""

    inputs: np.ndarray        # (N, 3)
    targets: np.ndarray       # (N,)
    input_labels: tuple
    state_label: str
    diff_mode: str
    stride: int
    ts_seconds: float

    def __len__(self) -> int:
        return self.targets.size


def build_dataset(traj: Trajectory, state_label: str,
                  mode: str = "consistent", stride: int = 1) -> SidDataset:
    """Dataset for one state equation, subsampled by ``stride``.

    The supply voltage is excluded from the inputs, which is only sound
    when it never moves; a varying ``v_in`` column is rejected here.
    """
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    target_full = finite_diff(traj.state_column(state_label), mode)
    vin_span = float(np.ptp(traj.v_in))
    if vin_span > 1e-9 * max(1.0, abs(float(traj.v_in[0]))):
        raise DegenerateDataError(
            f"v_in varies by {vin_span:g} over the trajectory; it cannot "
            "be dropped from the regressors")
    inputs = np.column_stack([traj.i_l, traj.v_c, traj.duty])[::stride]
    return SidDataset(inputs=np.ascontiguousarray(inputs),
                      targets=target_full[::stride].copy(),
                      input_labels=INPUT_LABELS,
                      state_label=state_label,
                      diff_mode=mode,
                      stride=int(stride),
                      ts_seconds=traj.ts_seconds)


def input_ranges(ds: SidDataset) -> list[tuple[float, float]]:
    """Observed (min, max) per input column; degenerate columns refused."""
    ranges = []
    for i, label in enumerate(ds.input_labels):
        col = ds.inputs[:, i]
        lo, hi = float(col.min()), float(col.max())
        if hi <= lo:
            raise DegenerateDataError(
                f"input column '{label}' is constant ({lo})")
        ranges.append((lo, hi))
    return ranges


def write_trajectory_csv(traj: Trajectory, path) -> None:
    """Write with shortest exact decimal reprs so reads round-trip."""
    buf = io.StringIO()
    buf.write(",".join(TRAJECTORY_COLUMNS) + "\n")
    cols = (traj.time, traj.i_l, traj.v_c, traj.v_out, traj.duty, traj.v_in)
    for row in zip(*cols):
        buf.write(",".join(repr(float(v)) for v in row) + "\n")
    atomic_write_text(path, buf.getvalue())


def read_trajectory_csv(path) -> Trajectory:
    """Parse and validate a trajectory file written by this package."""
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError(f"{os.fspath(path)}: file is empty")
        header = [h.strip() for h in header]
        missing = [c for c in TRAJECTORY_COLUMNS if c not in header]
        if missing:
            raise ValueError(
                f"{os.fspath(path)}: missing column '{missing[0]}' "
                f"(header is {header})")
        idx = [header.index(c) for c in TRAJECTORY_COLUMNS]
        rows = []
        for lineno, rec in enumerate(reader, start=2):
            if not rec or (len(rec) == 1 and not rec[0].strip()):
                continue
            try:
                rows.append([float(rec[i]) for i in idx])
            except (ValueError, IndexError):
                raise ValueError(
                    f"{os.fspath(path)}:{lineno}: bad row {rec!r}")
    if len(rows) < 2:
        raise ValueError(f"{os.fspath(path)}: needs at least 2 data rows")
    arr = np.asarray(rows, dtype=float)
    t = arr[:, 0]
    dt = np.diff(t)
    ts = float(np.median(dt))
    return Trajectory(ts_seconds=ts, time=t, i_l=arr[:, 1], v_c=arr[:, 2],
                      v_out=arr[:, 3], duty=arr[:, 4], v_in=arr[:, 5])
