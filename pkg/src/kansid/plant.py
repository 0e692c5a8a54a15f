"""Averaged buck-converter plant, PI loop, and trajectory generation.

The switched converter is modeled by its duty-averaged dynamics with
inductor/capacitor/switch resistances folded in. With the voltage divider
``alpha = R / (R + r_c)`` and series drop ``r_s = r_l + r_on``:

    v_out = alpha * (v_C + r_c * i_L)
    di/dt = (D * v_in - r_s * i_L - v_out) / L
    dv/dt = (alpha * i_L - (alpha / R) * v_C) / C

which is linear time-invariant in the state ``[i_L, v_C]`` with inputs
``[D, gamma]`` (``gamma`` is the constant-one offset channel). Integration
uses classical fourth-order Runge-Kutta; because the system is LTI with the
input held over each substep, the RK4 update collapses to an exact affine
map per substep, which is precomputed once and applied per sample.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .data import Trajectory
from .errors import ModelFormatError, SimulationDivergedError
from .util import atomic_write_text

SS_INPUT_LABELS = ("D", "gamma")


@dataclass(frozen=True)
class BuckParams:
    """Electrical parameters; defaults mirror the bench converter."""

    v_in: float = 10.0
    inductance: float = 10.3e-6
    capacitance: float = 720e-6
    load_r: float = 3.0
    r_l: float = 0.05
    r_c: float = 0.02
    r_on: float = 0.03
    f_sw: float = 20e3

    def __post_init__(self):
        for name in ("v_in", "inductance", "capacitance", "load_r", "f_sw"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be > 0, got "
                                 f"{getattr(self, name)}")
        for name in ("r_l", "r_c", "r_on"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0, got "
                                 f"{getattr(self, name)}")

    @property
    def ts_seconds(self) -> float:
        """Sample period: half the switching period."""
        return 1.0 / (2.0 * self.f_sw)

    @property
    def alpha(self) -> float:
        return self.load_r / (self.load_r + self.r_c)

    @property
    def r_series(self) -> float:
        return self.r_l + self.r_on


def averaged_derivatives(p: BuckParams, i_l: float, v_c: float,
                         duty: float):
    """(di/dt, dv/dt, v_out) of the averaged model at one operating point."""
    if np.any((np.asarray(duty) < 0) | (np.asarray(duty) > 1)):
        raise ValueError(f"duty {duty} outside [0, 1]")
    v_out = p.alpha * (v_c + p.r_c * i_l)
    di = (duty * p.v_in - p.r_series * i_l - v_out) / p.inductance
    dv = (p.alpha * i_l - (p.alpha / p.load_r) * v_c) / p.capacitance
    return di, dv, v_out


@dataclass
class StateSpaceModel:
    """x+ = A x + B u with u = [D, gamma], y = Cm x + Dm u."""

    a: np.ndarray
    b: np.ndarray
    cm: np.ndarray
    dm: np.ndarray
    input_labels: tuple = SS_INPUT_LABELS
    state_labels: tuple = ("i_L", "v_C")

    def __post_init__(self):
        self.a = np.asarray(self.a, dtype=float)
        self.b = np.asarray(self.b, dtype=float)
        self.cm = np.asarray(self.cm, dtype=float)
        self.dm = np.asarray(self.dm, dtype=float)
        n = self.a.shape[0]
        if self.a.shape != (n, n):
            raise ValueError(f"A must be square, got {self.a.shape}")
        if self.b.shape[0] != n:
            raise ValueError(f"B rows {self.b.shape} do not match A {n}x{n}")
        if self.cm.shape[1] != n or self.dm.shape[1] != self.b.shape[1]:
            raise ValueError("output matrices do not match state/input dims")


def true_state_space(p: BuckParams) -> StateSpaceModel:
    """Exact continuous-time matrices of the averaged model."""
    al = p.alpha
    a = np.array([
        [-(p.r_series + al * p.r_c) / p.inductance, -al / p.inductance],
        [al / p.capacitance, -al / (p.load_r * p.capacitance)],
    ])
    b = np.array([
        [p.v_in / p.inductance, 0.0],
        [0.0, 0.0],
    ])
    cm = np.array([[0.0, 1.0]])
    dm = np.array([[0.0, 0.0]])
    return StateSpaceModel(a=a, b=b, cm=cm, dm=dm)


@dataclass
class PiController:
    """PI regulator with output clamp and conditional anti-windup.

    The integrator only advances when the pre-clamp output is inside the
    limits, so it cannot wind up while the duty command is saturated.
    """

    kp: float = 0.02
    ki: float = 10.0
    out_min: float = 0.0
    out_max: float = 1.0
    integrator: float = 0.0

    def __post_init__(self):
        if self.out_max <= self.out_min:
            raise ValueError("empty output range")

    def step(self, reference: float, measurement: float, dt: float) -> float:
        if dt <= 0:
            raise ValueError(f"dt must be > 0, got {dt}")
        error = reference - measurement
        raw = self.kp * error + self.integrator
        if self.out_min <= raw <= self.out_max:
            self.integrator += self.ki * error * dt
            return raw
        return self.out_min if raw < self.out_min else self.out_max


def pi_step(ctrl: PiController, reference: float, measurement: float,
            dt: float) -> float:
    return ctrl.step(reference, measurement, dt)


@dataclass(frozen=True)
class ReferenceProfile:
    """Piecewise-constant setpoint schedule as (start_time, value) steps."""

    steps: tuple

    def __post_init__(self):
        steps = tuple((float(t), float(v)) for t, v in self.steps)
        object.__setattr__(self, "steps", steps)
        if not steps:
            raise ValueError("profile needs at least one step")
        if steps[0][0] != 0.0:
            raise ValueError(f"first step must start at t=0, got "
                             f"{steps[0][0]}")
        times = [t for t, _ in steps]
        if any(b <= a for a, b in zip(times, times[1:])):
            raise ValueError(f"step times must strictly increase: {times}")

    def value_at(self, t: float) -> float:
        value = self.steps[0][1]
        for start, v in self.steps:
            if t >= start:
                value = v
            else:
                break
        return value

    def values(self, times: np.ndarray) -> np.ndarray:
        starts = np.array([t for t, _ in self.steps])
        vals = np.array([v for _, v in self.steps])
        idx = np.clip(np.searchsorted(starts, times, side="right") - 1,
                      0, len(vals) - 1)
        return vals[idx]


DEFAULT_REFERENCE = ReferenceProfile(((0.0, 4.0), (1.5, 6.0), (3.0, 5.0)))
DEFAULT_VALIDATION_REFERENCE = ReferenceProfile(
    ((0.0, 5.0), (1.0, 3.5), (2.5, 6.0)))


def rk4_sample_maps(a: np.ndarray, b: np.ndarray, ts: float,
                    substeps: int = 4):
    """Exact one-sample affine update (M, N) for RK4 on an LTI system.

    One RK4 substep of size ``h`` on ``x' = Ax + Bu`` with ``u`` frozen is
    ``x+ = M1 x + N1 u`` where ``M1`` is the degree-4 Taylor polynomial of
    ``exp(hA)``; ``substeps`` of them compose into the returned pair.
    """
    if substeps < 1:
        raise ValueError(f"substeps must be >= 1, got {substeps}")
    if ts <= 0:
        raise ValueError(f"sample period must be > 0, got {ts}")
    n = a.shape[0]
    h = ts / substeps
    ha = h * a
    m1 = np.eye(n) + ha @ (np.eye(n) + ha @ (np.eye(n) / 2.0
                                             + ha @ (np.eye(n) / 6.0
                                                     + ha / 24.0)))
    n1 = h * (np.eye(n) + ha / 2.0 + ha @ ha / 6.0
              + ha @ ha @ ha / 24.0) @ b
    m_total = np.eye(n)
    n_total = np.zeros_like(n1)
    for _ in range(substeps):
        n_total = m1 @ n_total + n1
        m_total = m1 @ m_total
    return m_total, n_total


def _expm_affine(a: np.ndarray, b: np.ndarray, ts: float):
    """Exact one-sample update (M, N) for ``x' = Ax + Bu`` with frozen u.

    Computed as one matrix exponential of the augmented block matrix
    [[A, B], [0, 0]] via scaling-and-squaring on a Taylor series, so the
    maps are accurate to machine precision regardless of ``ts * ||A||``.
    """
    n = a.shape[0]
    m = b.shape[1]
    aug = np.zeros((n + m, n + m))
    aug[:n, :n] = a * ts
    aug[:n, n:] = b * ts
    norm = float(np.abs(aug).sum(axis=1).max())
    squarings = max(0, int(math.ceil(math.log2(norm / 0.5))) if norm > 0.5
                    else 0)
    x = aug / (2.0 ** squarings)
    term = np.eye(n + m)
    total = np.eye(n + m)
    for j in range(1, 17):
        term = term @ x / j
        total = total + term
    for _ in range(squarings):
        total = total @ total
    return total[:n, :n], total[:n, n:]


def _closed_loop_maps(ss: StateSpaceModel, ctrl: PiController, ts: float,
                      measured_row: np.ndarray):
    """One-sample affine update for the unsaturated continuous loop.

    Augmented state z = (i_L, v_C, integrator) with inputs (v_ref, 1);
    ``measured_row`` maps states to the voltage the regulator sees. Valid
    only while the pre-clamp duty stays inside the controller limits.
    """
    c = measured_row
    b_d = ss.b[:, 0]
    b_g = ss.b[:, 1]
    kp, ki = ctrl.kp, ctrl.ki
    a_cl = np.zeros((3, 3))
    a_cl[:2, :2] = ss.a - np.outer(b_d, kp * c)
    a_cl[:2, 2] = b_d
    a_cl[2, :2] = -ki * c
    b_cl = np.zeros((3, 2))
    b_cl[:2, 0] = kp * b_d
    b_cl[:2, 1] = b_g
    b_cl[2, 0] = ki
    return _expm_affine(a_cl, b_cl, ts)


def equilibrium_point(p: BuckParams, v_ref: float):
    """Steady state (i_L, v_C, duty) holding the output at ``v_ref``."""
    ss = true_state_space(p)
    c = np.array([p.alpha * p.r_c, p.alpha])
    m = np.zeros((3, 3))
    m[:2, :2] = ss.a
    m[:2, 2] = ss.b[:, 0]
    m[2, :2] = c
    rhs = np.array([0.0, 0.0, float(v_ref)])
    try:
        sol = np.linalg.solve(m, rhs)
    except np.linalg.LinAlgError as exc:
        raise ValueError(
            f"plant has no equilibrium holding v_out = {v_ref}") from exc
    return float(sol[0]), float(sol[1]), float(sol[2])


def simulate_plant(p: BuckParams, controller: PiController,
                   profile: ReferenceProfile, duration_seconds: float,
                   noise_sigma=None, seed: int = 0, x0=None) -> Trajectory:
    """Closed-loop run sampled every ``ts_seconds``.

    Plant and PI regulator evolve together in continuous time (the loop is
    integrated exactly while the duty command is unsaturated, and by
    clamped RK4 substeps otherwise), so the duty recorded at row k is the
    instantaneous controller output at t_k, sampled like the states.
    Measurement noise, when enabled, lands on the recorded state columns
    only; the control loop and the integrator always see the clean signal.

    With ``x0=None`` the run starts settled at the profile's initial
    setpoint: states at the equilibrium and the controller integrator
    holding the equilibrium duty, the way a converter that has been running
    looks when capture begins. Pass an explicit ``(i_L, v_C)`` pair to
    start elsewhere; the integrator then keeps the controller's own value.
    """
    if duration_seconds <= 0:
        raise ValueError("duration must be > 0")
    ts = p.ts_seconds
    n_steps = int(round(duration_seconds / ts))
    if n_steps < 1:
        raise ValueError("duration is shorter than one sample period")
    ss = true_state_space(p)
    mcl, ncl = _closed_loop_maps(
        ss, controller, ts,
        measured_row=np.array([p.alpha * p.r_c, p.alpha]))
    a11_, a12_, a13_ = mcl[0]
    a21_, a22_, a23_ = mcl[1]
    a31_, a32_, a33_ = mcl[2]
    r11_, r12_ = ncl[0]
    r21_, r22_ = ncl[1]
    r31_, r32_ = ncl[2]
    a00, a01 = ss.a[0]
    a10, a11 = ss.a[1]
    bd0, bg0 = ss.b[0]
    bd1, bg1 = ss.b[1]
    alpha, r_c = p.alpha, p.r_c
    c0, c1 = alpha * r_c, alpha
    kp, ki = controller.kp, controller.ki
    lo, hi = controller.out_min, controller.out_max
    if x0 is None:
        eq_i, eq_v, eq_duty = equilibrium_point(p, profile.value_at(0.0))
        x_i, x_v = eq_i, eq_v
        controller.integrator = eq_duty
    else:
        x_i, x_v = float(x0[0]), float(x0[1])
    integ = controller.integrator
    refs = profile.values(np.arange(n_steps + 1) * ts)

    n_sub = 8
    h = ts / n_sub

    def deriv(xi, xv, xw, ref):
        err = ref - (c0 * xi + c1 * xv)
        u = kp * err + xw
        if u < lo:
            d, dw = lo, 0.0
        elif u > hi:
            d, dw = hi, 0.0
        else:
            d, dw = u, ki * err
        return (a00 * xi + a01 * xv + bd0 * d + bg0,
                a10 * xi + a11 * xv + bd1 * d + bg1,
                dw)

    t_col = np.arange(n_steps + 1) * ts
    i_col = np.empty(n_steps + 1)
    v_col = np.empty(n_steps + 1)
    d_col = np.empty(n_steps + 1)
    for k in range(n_steps + 1):
        ref = refs[k]
        raw = kp * (ref - (c0 * x_i + c1 * x_v)) + integ
        duty = lo if raw < lo else hi if raw > hi else raw
        i_col[k] = x_i
        v_col[k] = x_v
        d_col[k] = duty
        if k == n_steps:
            break
        if raw < lo or raw > hi:
            # Saturated: integrate the clamped loop in short RK4 substeps.
            for _ in range(n_sub):
                k1 = deriv(x_i, x_v, integ, ref)
                k2 = deriv(x_i + 0.5 * h * k1[0], x_v + 0.5 * h * k1[1],
                           integ + 0.5 * h * k1[2], ref)
                k3 = deriv(x_i + 0.5 * h * k2[0], x_v + 0.5 * h * k2[1],
                           integ + 0.5 * h * k2[2], ref)
                k4 = deriv(x_i + h * k3[0], x_v + h * k3[1],
                           integ + h * k3[2], ref)
                x_i += h * (k1[0] + 2 * k2[0] + 2 * k3[0] + k4[0]) / 6.0
                x_v += h * (k1[1] + 2 * k2[1] + 2 * k3[1] + k4[1]) / 6.0
                integ += h * (k1[2] + 2 * k2[2] + 2 * k3[2] + k4[2]) / 6.0
        else:
            x_i, x_v, integ = (
                a11_ * x_i + a12_ * x_v + a13_ * integ + r11_ * ref + r12_,
                a21_ * x_i + a22_ * x_v + a23_ * integ + r21_ * ref + r22_,
                a31_ * x_i + a32_ * x_v + a33_ * integ + r31_ * ref + r32_,
            )
        if not (math.isfinite(x_i) and math.isfinite(x_v)
                and math.isfinite(integ)):
            raise SimulationDivergedError(
                f"plant state became non-finite at t={(k + 1) * ts:g} s",
                time_seconds=(k + 1) * ts)
    controller.integrator = integ
    if noise_sigma is not None:
        sig_i, sig_v = noise_sigma
        if sig_i < 0 or sig_v < 0:
            raise ValueError("noise sigmas must be >= 0")
        if sig_i > 0 or sig_v > 0:
            rng = np.random.default_rng(seed)
            i_col = i_col + rng.normal(0.0, sig_i, i_col.size)
            v_col = v_col + rng.normal(0.0, sig_v, v_col.size)
    vout_col = alpha * (v_col + r_c * i_col)
    return Trajectory(ts_seconds=ts, time=t_col, i_l=i_col, v_c=v_col,
                      v_out=vout_col, duty=d_col,
                      v_in=np.full(n_steps + 1, p.v_in))


def simulate_statespace(model: StateSpaceModel, duty, ts_seconds: float,
                        x0=(0.0, 0.0), substeps: int = 4) -> np.ndarray:
    """Replay a recorded duty sequence through a state-space model.

    Returns the output series y_k = Cm x_k + Dm u_k aligned with ``duty``;
    gamma is held at 1 throughout.
    """
    duty = np.asarray(duty, dtype=float)
    if duty.ndim != 1 or duty.size == 0:
        raise ValueError("duty must be a non-empty 1-D series")
    n_states = model.a.shape[0]
    x = np.asarray(x0, dtype=float).copy()
    if x.shape != (n_states,):
        raise ValueError(f"x0 has shape {x.shape}, expected ({n_states},)")
    m, nmat = rk4_sample_maps(model.a, model.b, ts_seconds, substeps)
    cm, dm = model.cm, model.dm
    if n_states == 2 and model.b.shape[1] == 2:
        # Scalar-unrolled path: the replay runs over hundreds of thousands
        # of samples, and 2x2 matmuls per step dominate otherwise.
        m11, m12 = m[0]
        m21, m22 = m[1]
        n11, n12 = nmat[0]
        n21, n22 = nmat[1]
        xi = np.empty(duty.size)
        xv = np.empty(duty.size)
        x_i, x_v = float(x[0]), float(x[1])
        for k, d in enumerate(duty):
            xi[k] = x_i
            xv[k] = x_v
            x_i, x_v = (m11 * x_i + m12 * x_v + n11 * d + n12,
                        m21 * x_i + m22 * x_v + n21 * d + n22)
            if not (math.isfinite(x_i) and math.isfinite(x_v)):
                if k + 1 < duty.size:
                    raise SimulationDivergedError(
                        f"model state became non-finite at "
                        f"t={(k + 1) * ts_seconds:g} s",
                        time_seconds=(k + 1) * ts_seconds)
        return (cm[0, 0] * xi + cm[0, 1] * xv
                + dm[0, 0] * duty + dm[0, 1])
    ys = np.empty(duty.size)
    for k in range(duty.size):
        u = np.array([duty[k], 1.0])
        ys[k] = cm @ x + dm @ u
        if k + 1 < duty.size:
            x = m @ x + nmat @ u
            if not np.all(np.isfinite(x)):
                raise SimulationDivergedError(
                    f"model state became non-finite at t={(k + 1) * ts_seconds:g} s",
                    time_seconds=(k + 1) * ts_seconds)
    return ys


def statespace_to_dict(model: StateSpaceModel) -> dict:
    return {
        "A": model.a.tolist(),
        "B": model.b.tolist(),
        "Cm": model.cm.tolist(),
        "Dm": model.dm.tolist(),
        "input_labels": list(model.input_labels),
    }


def statespace_from_dict(doc: dict) -> StateSpaceModel:
    for key in ("A", "B", "Cm", "Dm", "input_labels"):
        if not isinstance(doc, dict) or key not in doc:
            raise ModelFormatError(
                f"missing field '{key}' in state-space document")
    try:
        return StateSpaceModel(
            a=np.asarray(doc["A"], dtype=float),
            b=np.asarray(doc["B"], dtype=float),
            cm=np.asarray(doc["Cm"], dtype=float),
            dm=np.asarray(doc["Dm"], dtype=float),
            input_labels=tuple(doc["input_labels"]))
    except (TypeError, ValueError) as exc:
        raise ModelFormatError(f"bad state-space matrices: {exc}")


def save_statespace(model: StateSpaceModel, path) -> None:
    atomic_write_text(
        path, json.dumps(statespace_to_dict(model), indent=2) + "\n")


def load_statespace(path) -> StateSpaceModel:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ModelFormatError(
                f"state-space file is not valid JSON: {exc}")
    return statespace_from_dict(doc)
