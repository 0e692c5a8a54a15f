"""End-to-end identification: simulate, train, extract, assemble, verify.

Per state the flow is: build the finite-difference dataset, train a spline
network on it, fade inputs whose first-layer activations are negligible,
snap the surviving edges to symbolic primitives, optionally polish any
still-trainable parameters, fold the network into an affine equation, and
rescale it by 1/Ts (the targets are per-sample differences, so the learned
map is Ts times the continuous-time derivative).

Training and extraction normalize the difference targets to unit RMS and
fold the factor back into the network's output layer afterwards, so
returned networks and equations are always in raw target units. Without
this the per-sample differences (~1e-3 in state units) are dwarfed by the
freshly initialized spline coefficients, and the sparsity penalty then
spends the whole run fighting initialization remnants instead of trimming
genuinely unused inputs.
"""

from __future__ import annotations

import copy
import json
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .data import (INPUT_LABELS, STATE_LABELS, DIFF_MODES, SidDataset,
                   Trajectory, build_dataset, input_ranges)
from .errors import ModelFormatError, NotSymbolicError
from .network import (KanNetwork, apply_override, fix_input_zero, forward,
                      new_network, num_params, scale_output, stats_from_cache,
                      to_equation)
from .optimize import TrainConfig, TrainReport, lbfgs_train
from .plant import (DEFAULT_REFERENCE, DEFAULT_VALIDATION_REFERENCE,
                    BuckParams, PiController, ReferenceProfile,
                    StateSpaceModel, simulate_plant, simulate_statespace,
                    statespace_to_dict)
from .splines import grid_from_samples
from .symbolic import (DEFAULT_LIBRARY, PRIMITIVES, SymbolicEquation,
                       suggest_primitives)


@dataclass
class PipelineConfig:
    """Everything the pipeline needs besides the plant parameters."""

    # Training defaults differ from bare TrainConfig(): identification runs
    # longer (240 steps, memory 40) on a sum-reduced loss, where lamb=0.01
    # reliably trims the duty input out of the voltage equation without
    # touching real dynamics. See TrainConfig for the per-field meanings.
    train: TrainConfig = field(default_factory=lambda: TrainConfig(
        steps=240, lamb=0.01, memory=40, reduction="sum"))
    # data; the stride thins ~2e5 samples to ~4e3, which both keeps
    # full-batch training cheap and (measured against the analytic plant)
    # lands the finite-difference slopes closest to the true matrices.
    stride: int = 47
    diff_mode: str = "consistent"
    allow_literal: bool = False
    # network: a first-order two-knot basis spans exactly the affine maps a
    # linear plant needs; wider grids are for deliberately nonlinear runs.
    grid_intervals: int = 1
    spline_order: int = 1
    grid_margin: float = 0.05
    hidden: tuple = ()
    # extraction
    fade_threshold: float = 1e-3
    r2_accept: float = 0.99
    library: tuple = DEFAULT_LIBRARY
    # closed-loop run
    duration_seconds: float = 5.0
    noise_i: float = 0.0
    noise_v: float = 0.0
    kp: float = 0.02
    ki: float = 10.0
    reference: ReferenceProfile = DEFAULT_REFERENCE
    validation_reference: ReferenceProfile = DEFAULT_VALIDATION_REFERENCE
    seed: int = 7

    def validate(self) -> None:
        self.train.validate()
        if self.stride < 1:
            raise ValueError(f"stride must be >= 1, got {self.stride}")
        if self.diff_mode not in DIFF_MODES:
            raise ValueError(f"unknown diff mode '{self.diff_mode}'")
        if self.grid_intervals < 1:
            raise ValueError("grid_intervals must be >= 1")
        if self.spline_order < 0:
            raise ValueError("spline_order must be >= 0")
        if self.grid_margin < 0:
            raise ValueError("grid_margin must be >= 0")
        if any(h < 1 for h in self.hidden):
            raise ValueError(f"bad hidden widths {self.hidden}")
        if self.fade_threshold < 0:
            raise ValueError("fade_threshold must be >= 0")
        if not (0.0 < self.r2_accept <= 1.0):
            raise ValueError("r2_accept must be in (0, 1]")
        unknown = [p for p in self.library if p not in PRIMITIVES]
        if not self.library or unknown:
            raise ValueError(f"bad primitive library {self.library}")
        if self.duration_seconds <= 0:
            raise ValueError("duration_seconds must be > 0")
        if self.noise_i < 0 or self.noise_v < 0:
            raise ValueError("noise sigmas must be >= 0")


# Edge-shape fits see at most this many (x, phi(x)) pairs, spread uniformly
# over the dataset rows; the shapes are smooth deterministic curves, so the
# cap changes nothing but the grid-search cost.
SNAP_SAMPLE_CAP = 4096


@dataclass
class InputFate:
    label: str
    fate: str                  # "faded", "fixed:<primitive>", or "spline"
    r2: float | None = None


@dataclass
class StateIdentification:
    state_label: str
    net: KanNetwork
    equation: SymbolicEquation | None
    train_report: TrainReport
    fates: list[InputFate]
    predictions: np.ndarray    # final per-sample Ts * x_dot estimates
    targets: np.ndarray
    failure: str | None = None


def _check_diff_mode(ds: SidDataset, cfg: PipelineConfig) -> None:
    if ds.diff_mode == "literal" and not cfg.allow_literal:
        raise ValueError(
            "dataset uses literal differences whose interior rows span two "
            "sample periods; pass allow_literal=True to accept the scaling "
            "mismatch")


def _target_scale(targets: np.ndarray) -> float:
    """RMS of the targets, guarded so all-zero targets scale by 1."""
    s = float(np.sqrt(np.mean(np.square(targets))))
    return s if np.isfinite(s) and s > 0.0 else 1.0


def _merge_reports(first: TrainReport, second: TrainReport) -> TrainReport:
    """Concatenate two consecutive training phases into one report."""
    return TrainReport(
        losses=first.losses + second.losses,
        data_losses=first.data_losses + second.data_losses,
        penalties=first.penalties + second.penalties,
        grad_norm=second.grad_norm,
        steps_run=first.steps_run + second.steps_run,
        line_search_failures=(first.line_search_failures
                              + second.line_search_failures),
        converged=second.converged,
        wall_clock_seconds=(first.wall_clock_seconds
                            + second.wall_clock_seconds),
        records=first.records + second.records,
    )


def train_state(ds: SidDataset,
                cfg: PipelineConfig) -> tuple[KanNetwork, TrainReport]:
    """Fit a fresh spline network to one state's difference targets.

    Training runs in two phases: a pure data fit with the sparsity penalty
    off, then the configured penalized run warm-started from that fit. From
    a random start the penalty's entropy term can trap the optimizer in an
    all-edges-dead stationary point (reviving any edge raises the entropy
    sharply when total activation mass is near zero); starting the penalized
    phase from a converged fit sidesteps that region entirely, and the
    penalty then only has to fade inputs the data does not defend.
    """
    cfg.validate()
    _check_diff_mode(ds, cfg)
    input_ranges(ds)  # reject constant columns up front
    grids = [grid_from_samples(ds.inputs[:, i], cfg.grid_intervals,
                               cfg.spline_order, cfg.grid_margin, label=lab)
             for i, lab in enumerate(ds.input_labels)]
    shape = [len(ds.input_labels), *cfg.hidden, 1]
    net = new_network(shape, ds.input_labels, grids=grids,
                      seed=cfg.train.seed, ts_seconds=ds.ts_seconds)
    scale = _target_scale(ds.targets)
    scaled_ds = replace(ds, targets=ds.targets / scale)
    fitted, fit_report = lbfgs_train(
        net, scaled_ds, replace(cfg.train, lamb=0.0))
    trained, pen_report = lbfgs_train(fitted, scaled_ds, cfg.train)
    scale_output(trained, scale)
    return trained, _merge_reports(fit_report, pen_report)


def extract_state(net: KanNetwork, ds: SidDataset, cfg: PipelineConfig,
                  base_report: TrainReport | None = None) -> StateIdentification:
    """Fade, snap to primitives, polish, and fold a trained network.

    When some edge refuses a symbolic fit the returned record carries the
    network and per-input R^2 but ``equation`` stays None.
    """
    cfg.validate()
    _check_diff_mode(ds, cfg)
    net = copy.deepcopy(net)
    # Work in the unit-RMS target space the optimizer saw (fade ratios and
    # fit R^2 are scale-free; the polish retrain is not) and restore raw
    # units at the end.
    scale = _target_scale(ds.targets)
    scale_output(net, 1.0 / scale)
    scaled_ds = replace(ds, targets=ds.targets / scale)
    report = base_report
    _, cache = forward(net, ds.inputs, with_cache=True)
    stats = stats_from_cache(cache)
    scores = stats.input_scores()
    dominant = float(scores.max())
    fates: list[InputFate] = []
    faded = []
    for i, label in enumerate(ds.input_labels):
        if scores[i] <= cfg.fade_threshold * dominant:
            fix_input_zero(net, i)
            faded.append(i)
            fates.append(InputFate(label=label, fate="faded"))
        else:
            fates.append(InputFate(label=label, fate="spline"))

    # Snap remaining edges to primitives, sampling the post-fade network so
    # deeper layers see their actual inputs. The fit only needs the edge's
    # smooth deterministic shape, so cap the sample count to keep the
    # primitive grid search cheap on full-rate datasets.
    snap_rows = np.unique(np.linspace(0, len(ds.targets) - 1,
                                      SNAP_SAMPLE_CAP).astype(int))
    _, cache = forward(net, ds.inputs[snap_rows], with_cache=True)
    for l, layer in enumerate(net.layers):
        lc = cache.layers[l]
        for j, row in enumerate(layer.edges):
            for i, edge in enumerate(row):
                if edge.symbolic is not None:
                    continue
                # sample straight from the cache instead of suggest_symbolic,
                # which would re-run the forward pass per edge
                best = suggest_primitives(lc.x[:, i], lc.acts[:, j, i],
                                          cfg.library)[0]
                accept = (best.r2_defined and best.r2 >= cfg.r2_accept) or \
                    (not best.r2_defined and best.ss_res == 0.0)
                if accept:
                    apply_override(net, l, j, i, best.as_override())
                    if l == 0:
                        fates[i].fate = f"fixed:{best.primitive}"
                        fates[i].r2 = None if not best.r2_defined else \
                            float(best.r2)
                elif l == 0:
                    fates[i].r2 = None if not best.r2_defined else \
                        float(best.r2)

    if num_params(net) > 0:
        polish_cfg = replace(cfg.train, steps=max(1, cfg.train.steps // 4))
        net, polish = lbfgs_train(net, scaled_ds, polish_cfg)
        report = polish if report is None else TrainReport(
            losses=report.losses + polish.losses,
            data_losses=report.data_losses + polish.data_losses,
            penalties=report.penalties + polish.penalties,
            grad_norm=polish.grad_norm,
            steps_run=report.steps_run + polish.steps_run,
            line_search_failures=(report.line_search_failures
                                  + polish.line_search_failures),
            converged=polish.converged,
            wall_clock_seconds=(report.wall_clock_seconds
                                + polish.wall_clock_seconds),
            records=report.records + polish.records,
        )
    if report is None:
        report = TrainReport(losses=[], data_losses=[], penalties=[],
                             grad_norm=0.0, steps_run=0,
                             line_search_failures=0, converged=False,
                             wall_clock_seconds=0.0, records=[])

    scale_output(net, scale)
    predictions = np.atleast_2d(forward(net, ds.inputs))[:, 0]
    edge_r2 = {f.label: f.r2 for f in fates}
    equation = None
    failure = None
    try:
        raw = to_equation(net, ds.state_label, edge_r2=edge_r2)
        equation = raw.scaled(1.0 / ds.ts_seconds)
    except NotSymbolicError as exc:
        failure = str(exc)
    return StateIdentification(state_label=ds.state_label, net=net,
                               equation=equation, train_report=report,
                               fates=fates, predictions=predictions,
                               targets=ds.targets.copy(), failure=failure)


def identify_state(ds: SidDataset, cfg: PipelineConfig) -> StateIdentification:
    """Train plus extract in one call; see the two stages for details."""
    net, report = train_state(ds, cfg)
    return extract_state(net, ds, cfg, base_report=report)


def assemble_state_space(eq_current: SymbolicEquation,
                         eq_voltage: SymbolicEquation) -> StateSpaceModel:
    """Stack the two rescaled state equations into (A, B, Cm, Dm).

    Constants land in B's gamma column: the offset channel is an input
    pinned to one, which keeps the model strictly linear in [x; u].
    """
    for eq, want in ((eq_current, "i_L"), (eq_voltage, "v_C")):
        if eq.state_label != want:
            raise ValueError(
                f"expected equation for state '{want}', got "
                f"'{eq.state_label}'")
        if not eq.scale_applied:
            raise ValueError(
                f"equation for '{want}' still carries the per-sample scale; "
                "rescale by 1/Ts first")
        if set(eq.slopes) != set(INPUT_LABELS):
            raise ValueError(
                f"equation for '{want}' has inputs {sorted(eq.slopes)}, "
                f"expected {sorted(INPUT_LABELS)}")
    a = np.array([
        [eq_current.slopes["i_L"], eq_current.slopes["v_C"]],
        [eq_voltage.slopes["i_L"], eq_voltage.slopes["v_C"]],
    ])
    b = np.array([
        [eq_current.slopes["D"], eq_current.constant],
        [eq_voltage.slopes["D"], eq_voltage.constant],
    ])
    return StateSpaceModel(a=a, b=b, cm=np.array([[0.0, 1.0]]),
                           dm=np.array([[0.0, 0.0]]))


@dataclass
class VerificationResult:
    trajectory_source: str
    rmse: float
    max_err: float
    mean_abs_ref: float
    n_samples: int
    predicted: np.ndarray = field(repr=False, default=None)


def verify_model(model: StateSpaceModel, traj: Trajectory,
                 source: str = "validation") -> VerificationResult:
    """Replay the recorded duty through the model and score the output."""
    predicted = simulate_statespace(model, traj.duty, traj.ts_seconds,
                                    x0=(traj.i_l[0], traj.v_c[0]))
    err = predicted - traj.v_c
    return VerificationResult(
        trajectory_source=source,
        rmse=float(np.sqrt(np.mean(err * err))),
        max_err=float(np.abs(err).max()),
        mean_abs_ref=float(np.abs(traj.v_c).mean()),
        n_samples=len(traj),
        predicted=predicted)


@dataclass
class EntryDelta:
    matrix: str
    row: int
    col: int
    ref: float
    new: float
    delta: float
    flagged: bool


def compare_models(ref: StateSpaceModel, new: StateSpaceModel,
                   rel_threshold: float = 0.1) -> list[EntryDelta]:
    """Signed relative change per matrix entry.

    The denominator keeps the reference's sign so that a magnitude drop
    reads as a negative delta regardless of sign (halving -462.96 is -50%).
    """
    if rel_threshold <= 0:
        raise ValueError("rel_threshold must be > 0")
    out = []
    for name in ("A", "B", "Cm", "Dm"):
        mr = getattr(ref, name.lower() if name in ("A", "B") else
                     ("cm" if name == "Cm" else "dm"))
        mn = getattr(new, name.lower() if name in ("A", "B") else
                     ("cm" if name == "Cm" else "dm"))
        if mr.shape != mn.shape:
            raise ValueError(
                f"matrix {name} shapes differ: {mr.shape} vs {mn.shape}")
        for r in range(mr.shape[0]):
            for c in range(mr.shape[1]):
                rv, nv = float(mr[r, c]), float(mn[r, c])
                sign = -1.0 if rv < 0 else 1.0
                delta = (nv - rv) / (sign * max(abs(rv), 1e-12))
                out.append(EntryDelta(matrix=name, row=r, col=c, ref=rv,
                                      new=nv, delta=delta,
                                      flagged=abs(delta) > rel_threshold))
    return out


@dataclass
class PipelineResult:
    params: BuckParams
    cfg: PipelineConfig
    states: list[StateIdentification]
    model: StateSpaceModel | None
    verifications: list[VerificationResult]
    training_trajectory: Trajectory
    validation_trajectory: Trajectory
    error: str | None
    elapsed_seconds: float


def _child_seed(master: int, *key) -> int:
    return int(np.random.SeedSequence([int(master), *key]).generate_state(1)[0])


def full_pipeline(params: BuckParams, cfg: PipelineConfig) -> PipelineResult:
    """Simulate the closed loop, identify both states, assemble, verify."""
    cfg.validate()
    t0 = time.perf_counter()
    noise = None
    if cfg.noise_i > 0 or cfg.noise_v > 0:
        noise = (cfg.noise_i, cfg.noise_v)
    ctrl = PiController(kp=cfg.kp, ki=cfg.ki)
    traj_train = simulate_plant(params, ctrl, cfg.reference,
                                cfg.duration_seconds, noise_sigma=noise,
                                seed=_child_seed(cfg.seed, 0, 0))
    traj_val = simulate_plant(params, ctrl, cfg.validation_reference,
                              cfg.duration_seconds, noise_sigma=noise,
                              seed=_child_seed(cfg.seed, 0, 1))
    states = []
    for idx, label in enumerate(STATE_LABELS):
        ds = build_dataset(traj_train, label, cfg.diff_mode, cfg.stride)
        state_cfg = replace(
            cfg, train=replace(cfg.train, seed=_child_seed(cfg.seed, 1, idx)))
        states.append(identify_state(ds, state_cfg))

    model = None
    verifications = []
    error = None
    missing = [s.state_label for s in states if s.equation is None]
    if missing:
        error = "no closed-form equation for state(s): " + ", ".join(
            f"{lab} ({s.failure})" for lab, s in
            zip(missing, (s for s in states if s.equation is None)))
    else:
        model = assemble_state_space(states[0].equation, states[1].equation)
        verifications = [
            verify_model(model, traj_val, "validation"),
            verify_model(model, traj_train, "training"),
        ]
    return PipelineResult(params=params, cfg=cfg, states=states,
                          model=model, verifications=verifications,
                          training_trajectory=traj_train,
                          validation_trajectory=traj_val, error=error,
                          elapsed_seconds=time.perf_counter() - t0)


def _profile_str(profile: ReferenceProfile) -> str:
    return ",".join(f"{t:g}:{v:g}" for t, v in profile.steps)


def config_echo(params: BuckParams, cfg: PipelineConfig) -> dict:
    """Dotted-key view of the full run configuration, in canonical order."""
    return {
        "plant.v_in": params.v_in,
        "plant.inductance": params.inductance,
        "plant.capacitance": params.capacitance,
        "plant.load_r": params.load_r,
        "plant.r_l": params.r_l,
        "plant.r_c": params.r_c,
        "plant.r_on": params.r_on,
        "plant.f_sw": params.f_sw,
        "controller.kp": cfg.kp,
        "controller.ki": cfg.ki,
        "run.duration_seconds": cfg.duration_seconds,
        "run.reference": _profile_str(cfg.reference),
        "run.validation_reference": _profile_str(cfg.validation_reference),
        "run.noise_i": cfg.noise_i,
        "run.noise_v": cfg.noise_v,
        "run.seed": cfg.seed,
        "data.stride": cfg.stride,
        "data.diff_mode": cfg.diff_mode,
        "data.allow_literal": cfg.allow_literal,
        "net.grid_intervals": cfg.grid_intervals,
        "net.spline_order": cfg.spline_order,
        "net.grid_margin": cfg.grid_margin,
        "net.hidden": ",".join(str(h) for h in cfg.hidden),
        "train.steps": cfg.train.steps,
        "train.lamb": cfg.train.lamb,
        "train.lamb_entropy": cfg.train.lamb_entropy,
        "train.memory": cfg.train.memory,
        "train.c1": cfg.train.c1,
        "train.c2": cfg.train.c2,
        "train.max_line_search": cfg.train.max_line_search,
        "train.grad_tol": cfg.train.grad_tol,
        "train.reduction": cfg.train.reduction,
        "extract.fade_threshold": cfg.fade_threshold,
        "extract.r2_accept": cfg.r2_accept,
        "extract.library": ",".join(cfg.library),
    }


def equation_to_dict(eq: SymbolicEquation) -> dict:
    return {
        "slopes": {k: float(v) for k, v in eq.slopes.items()},
        "constant": float(eq.constant),
        "ts_rescaled": bool(eq.scale_applied),
    }


def equation_file_dict(eq: SymbolicEquation) -> dict:
    """Standalone equation document (adds the state label)."""
    return {"state": eq.state_label, **equation_to_dict(eq)}


def equation_from_dict(doc: dict) -> SymbolicEquation:
    for key in ("state", "slopes", "constant", "ts_rescaled"):
        if not isinstance(doc, dict) or key not in doc:
            raise ModelFormatError(
                f"missing field '{key}' in equation document")
    slopes = doc["slopes"]
    if not isinstance(slopes, dict):
        raise ModelFormatError("equation 'slopes' must be a mapping")
    return SymbolicEquation(
        state_label=str(doc["state"]),
        slopes={str(k): float(v) for k, v in slopes.items()},
        constant=float(doc["constant"]),
        scale_applied=bool(doc["ts_rescaled"]))


def report_to_dict(result: PipelineResult) -> dict:
    """Deterministic JSON document; wall-clock fields are excluded so two
    same-seed runs serialize byte-identically."""
    states = []
    for s in result.states:
        inputs = []
        for f in s.fates:
            entry = {"label": f.label, "fate": f.fate}
            if f.r2 is not None:
                entry["r2"] = float(f.r2)
            inputs.append(entry)
        states.append({
            "label": s.state_label,
            "train": {
                "losses": [float(v) for v in s.train_report.losses],
                "grad_norm": float(s.train_report.grad_norm),
            },
            "inputs": inputs,
            "equation": (None if s.equation is None
                         else equation_to_dict(s.equation)),
        })
    doc = {
        "states": states,
        "state_space": (None if result.model is None
                        else statespace_to_dict(result.model)),
        "verification": [
            {"trajectory_source": v.trajectory_source,
             "rmse": float(v.rmse),
             "max_err": float(v.max_err)}
            for v in result.verifications
        ],
        "config": config_echo(result.params, result.cfg),
        "seed": result.cfg.seed,
    }
    if result.error is not None:
        doc["error"] = result.error
    return doc


def report_json(result: PipelineResult) -> str:
    return json.dumps(report_to_dict(result), indent=2) + "\n"
