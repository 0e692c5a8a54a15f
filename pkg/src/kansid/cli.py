"""Command-line interface.

Subcommands cover the pipeline stage by stage (simulate, train, extract,
assemble, verify, compare) plus an end-to-end ``pipeline`` run. Machine
output goes to the ``--out`` files only; progress and diagnostics go to
stderr. Exit codes: 0 on success, 1 on domain failures (diverged runs, no
symbolic equation, degenerate data), 2 on usage, config, or file-format
problems.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import asdict, replace

from .config import config_help_lines, load_setup
from .data import STATE_LABELS, build_dataset, read_trajectory_csv, \
    write_trajectory_csv
from .errors import (ConfigError, KansidError, ModelFormatError,
                     NotSymbolicError)
from .network import load_model, save_model
from .pipeline import (_child_seed, assemble_state_space, compare_models,
                       equation_file_dict, equation_from_dict,
                       extract_state, full_pipeline, report_json,
                       train_state, verify_model)
from .plant import (PiController, load_statespace, save_statespace,
                    simulate_plant)
from .svgplot import emit_plot
from .util import atomic_write_text


def _say(msg: str) -> None:
    print(msg, file=sys.stderr)


def _write_json(path, doc) -> None:
    atomic_write_text(path, json.dumps(doc, indent=2) + "\n")


def _load_json(path) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise ModelFormatError(f"{path}: not valid JSON: {exc}")


def _setup(args):
    return load_setup(args.config, args.set, args.seed)


def cmd_simulate(args) -> int:
    params, cfg = _setup(args)
    profile = cfg.validation_reference if args.validation else cfg.reference
    noise = None
    if cfg.noise_i > 0 or cfg.noise_v > 0:
        noise = (cfg.noise_i, cfg.noise_v)
    noise_seed = _child_seed(cfg.seed, 0, 1 if args.validation else 0)
    ctrl = PiController(kp=cfg.kp, ki=cfg.ki)
    traj = simulate_plant(params, ctrl, profile, cfg.duration_seconds,
                          noise_sigma=noise, seed=noise_seed)
    write_trajectory_csv(traj, args.out)
    if args.plot:
        refs = profile.values(traj.time)
        emit_plot("trajectory",
                  [("reference [V]", traj.time, refs),
                   ("v_out [V]", traj.time, traj.v_out)],
                  args.plot)
    _say(f"simulate: wrote {len(traj)} rows ({cfg.duration_seconds:g} s at "
         f"Ts={traj.ts_seconds:g} s) to {args.out}")
    return 0


def cmd_train(args) -> int:
    params, cfg = _setup(args)
    del params
    traj = read_trajectory_csv(args.data)
    ds = build_dataset(traj, args.state, cfg.diff_mode, cfg.stride)
    idx = STATE_LABELS.index(args.state)
    cfg = replace(cfg, train=replace(cfg.train,
                                     seed=_child_seed(cfg.seed, 1, idx)))
    net, report = train_state(ds, cfg)
    save_model(net, args.out)
    final = report.losses[-1] if report.losses else float("nan")
    _say(f"train: {args.state} on {len(ds)} samples, "
         f"{report.steps_run} steps, final loss {final:.6g}, "
         f"grad {report.grad_norm:.3g} -> {args.out}")
    return 0


def cmd_extract(args) -> int:
    params, cfg = _setup(args)
    del params
    net = load_model(args.model)
    traj = read_trajectory_csv(args.data)
    ds = build_dataset(traj, args.state, cfg.diff_mode, cfg.stride)
    ident = extract_state(net, ds, cfg)
    for fate in ident.fates:
        extra = "" if fate.r2 is None else f" (R^2 = {fate.r2:.6f})"
        _say(f"extract: input {fate.label}: {fate.fate}{extra}")
    if ident.equation is None:
        raise NotSymbolicError(ident.failure)
    _write_json(args.out, equation_file_dict(ident.equation))
    _say(f"extract: wrote equation for {args.state} to {args.out}")
    return 0


def cmd_assemble(args) -> int:
    eqs = [equation_from_dict(_load_json(p)) for p in args.equations]
    by_state = {eq.state_label: eq for eq in eqs}
    if set(by_state) != set(STATE_LABELS):
        raise ValueError(
            f"need one equation per state {list(STATE_LABELS)}, got "
            f"{sorted(by_state)}")
    model = assemble_state_space(by_state["i_L"], by_state["v_C"])
    save_statespace(model, args.out)
    _say(f"assemble: wrote state-space model to {args.out}")
    return 0


def cmd_verify(args) -> int:
    model = load_statespace(args.model)
    traj = read_trajectory_csv(args.data)
    res = verify_model(model, traj, source=args.label)
    doc = {
        "trajectory_source": res.trajectory_source,
        "rmse": res.rmse,
        "max_err": res.max_err,
        "mean_abs_ref": res.mean_abs_ref,
        "n_samples": res.n_samples,
    }
    _write_json(args.out, doc)
    if args.plot:
        emit_plot("verification",
                  [("plant", traj.time, traj.v_c),
                   ("identified model", traj.time, res.predicted)],
                  args.plot, annotation=f"RMSE = {res.rmse:.6g} V")
    _say(f"verify: RMSE {res.rmse:.6g} V, max err {res.max_err:.6g} V over "
         f"{res.n_samples} samples -> {args.out}")
    return 0


def cmd_compare(args) -> int:
    ref = load_statespace(args.ref)
    new = load_statespace(args.new)
    deltas = compare_models(ref, new, args.threshold)
    doc = {"threshold": args.threshold,
           "entries": [asdict(d) for d in deltas]}
    _write_json(args.out, doc)
    flagged = [d for d in deltas if d.flagged]
    for d in flagged:
        _say(f"compare: {d.matrix}[{d.row}][{d.col}] {d.ref:.6g} -> "
             f"{d.new:.6g} ({100 * d.delta:+.2f}%)")
    _say(f"compare: {len(flagged)} of {len(deltas)} entries over "
         f"{100 * args.threshold:g}% -> {args.out}")
    return 0


def cmd_pipeline(args) -> int:
    params, cfg = _setup(args)
    result = full_pipeline(params, cfg)
    atomic_write_text(args.out, report_json(result))
    for s in result.states:
        final = s.train_report.losses[-1] if s.train_report.losses else \
            float("nan")
        eq = "ok" if s.equation is not None else "NOT SYMBOLIC"
        _say(f"pipeline: {s.state_label}: {s.train_report.steps_run} steps, "
             f"loss {final:.6g}, equation {eq}")
    for v in result.verifications:
        _say(f"pipeline: {v.trajectory_source} RMSE {v.rmse:.6g} V "
             f"({100 * v.rmse / v.mean_abs_ref:.3f}% of mean |v_C|)")
    if args.figures_dir:
        from .figures import render_report_outputs
        written = render_report_outputs(result, args.figures_dir)
        _say(f"pipeline: wrote {len(written)} figure/data files to "
             f"{args.figures_dir}")
    _say(f"pipeline: report -> {args.out} "
         f"({result.elapsed_seconds:.1f} s)")
    if result.error is not None:
        _say(f"pipeline: {result.error}")
        return 1
    return 0


_CONFIG_EPILOG = "config keys (for --config files and --set):\n" + \
    "\n".join(config_help_lines())


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="kansid",
        description="Spline-network system identification for buck "
                    "converters.",
        epilog=_CONFIG_EPILOG,
        formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=None, metavar="PATH",
                        help="config file path, or 'default' for built-ins")
    common.add_argument("--set", action="append", default=[],
                        metavar="KEY=VALUE", help="override one config key "
                        "(repeatable; see config keys in 'kansid --help')")
    common.add_argument("--seed", type=int, default=None,
                        help="override run.seed")

    p = sub.add_parser("simulate", parents=[common],
                       help="run the closed-loop plant and write a "
                            "trajectory CSV")
    p.add_argument("--out", required=True, help="trajectory CSV to write")
    p.add_argument("--validation", action="store_true",
                   help="use the validation setpoint schedule")
    p.add_argument("--plot", default=None, metavar="SVG",
                   help="also render the run to an SVG file")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("train", parents=[common],
                       help="fit a spline network for one state")
    p.add_argument("--data", required=True, help="trajectory CSV")
    p.add_argument("--state", required=True, choices=list(STATE_LABELS))
    p.add_argument("--out", required=True, help="model JSON to write")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("extract", parents=[common],
                       help="fade, snap to primitives, and fold a trained "
                            "model into an equation")
    p.add_argument("--model", required=True, help="model JSON from 'train'")
    p.add_argument("--data", required=True, help="trajectory CSV")
    p.add_argument("--state", required=True, choices=list(STATE_LABELS))
    p.add_argument("--out", required=True, help="equation JSON to write")
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("assemble",
                       help="stack two state equations into a state-space "
                            "model")
    p.add_argument("equations", nargs=2, metavar="EQUATION_JSON",
                   help="equation files for i_L and v_C (either order)")
    p.add_argument("--out", required=True, help="state-space JSON to write")
    p.set_defaults(func=cmd_assemble)

    p = sub.add_parser("verify",
                       help="replay a trajectory's duty through a model "
                            "and score the output")
    p.add_argument("--model", required=True, help="state-space JSON")
    p.add_argument("--data", required=True, help="trajectory CSV")
    p.add_argument("--out", required=True, help="metrics JSON to write")
    p.add_argument("--label", default="file",
                   help="trajectory_source label in the metrics")
    p.add_argument("--plot", default=None, metavar="SVG",
                   help="render the overlay to an SVG file")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("compare",
                       help="relative entry-by-entry diff of two models")
    p.add_argument("--ref", required=True, help="reference state-space JSON")
    p.add_argument("--new", required=True, help="new state-space JSON")
    p.add_argument("--threshold", type=float, default=0.1,
                   help="flag entries whose |delta| exceeds this "
                        "(default 0.1)")
    p.add_argument("--out", required=True, help="diff JSON to write")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("pipeline", parents=[common],
                       help="simulate, identify both states, assemble, "
                            "verify, and write the report")
    p.add_argument("--out", required=True, help="report JSON to write")
    p.add_argument("--figures-dir", default=None, metavar="DIR",
                   help="also render figures (PNG + SVG) and CSV data "
                        "there")
    p.set_defaults(func=cmd_pipeline)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ModelFormatError) as exc:
        _say(f"error: {exc}")
        return 2
    except KansidError as exc:
        _say(f"error: {exc}")
        return 1
    except ValueError as exc:
        _say(f"error: {exc}")
        return 2
    except OSError as exc:
        _say(f"error: {exc}")
        return 2


if __name__ == "__main__":
    sys.exit(main())
