"""Dotted-key run configuration.

Config files are plain text, one ``section.key = value`` per line with
``#`` comments; the same keys can be overridden on the command line via
``--set key=value``. Unknown keys are rejected by name. The key set is
exactly what the pipeline echoes into its report, so a report's ``config``
block can be replayed as a config file.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

from .data import DIFF_MODES
from .errors import ConfigError
from .optimize import TrainConfig
from .pipeline import PipelineConfig
from .plant import BuckParams, ReferenceProfile
from .symbolic import DEFAULT_LIBRARY


def _float(text: str) -> float:
    return float(text)


def _int(text: str) -> int:
    return int(text)


def _bool(text: str) -> bool:
    low = text.lower()
    if low in ("true", "1", "yes", "on"):
        return True
    if low in ("false", "0", "no", "off"):
        return False
    raise ValueError(f"expected true/false, got {text!r}")


def _choice(*options):
    def parse(text: str) -> str:
        if text not in options:
            raise ValueError(f"expected one of {options}, got {text!r}")
        return text
    return parse


def _profile(text: str) -> ReferenceProfile:
    steps = []
    for part in text.split(","):
        t, sep, v = part.partition(":")
        if not sep:
            raise ValueError(f"expected 'time:value', got {part!r}")
        steps.append((float(t), float(v)))
    return ReferenceProfile(tuple(steps))


def _int_tuple(text: str) -> tuple:
    if not text.strip():
        return ()
    return tuple(int(p) for p in text.split(","))


def _str_tuple(text: str) -> tuple:
    return tuple(p.strip() for p in text.split(",") if p.strip())


@dataclass(frozen=True)
class _Key:
    name: str
    parse: callable
    default: str
    help: str


KEYS = (
    _Key("plant.v_in", _float, "10.0", "supply voltage [V]"),
    _Key("plant.inductance", _float, "10.3e-6", "filter inductance [H]"),
    _Key("plant.capacitance", _float, "720e-6", "filter capacitance [F]"),
    _Key("plant.load_r", _float, "3.0", "load resistance [ohm]"),
    _Key("plant.r_l", _float, "0.05", "inductor series resistance [ohm]"),
    _Key("plant.r_c", _float, "0.02", "capacitor series resistance [ohm]"),
    _Key("plant.r_on", _float, "0.03", "switch on-resistance [ohm]"),
    _Key("plant.f_sw", _float, "20e3", "switching frequency [Hz]"),
    _Key("controller.kp", _float, "0.02", "PI proportional gain"),
    _Key("controller.ki", _float, "10.0", "PI integral gain [1/s]"),
    _Key("run.duration_seconds", _float, "5.0", "simulated time per run"),
    _Key("run.reference", _profile, "0:4,1.5:6,3:5",
         "training setpoint schedule, time:volts steps"),
    _Key("run.validation_reference", _profile, "0:5,1:3.5,2.5:6",
         "held-out setpoint schedule"),
    _Key("run.noise_i", _float, "0.0",
         "measurement noise sigma on recorded i_L [A]"),
    _Key("run.noise_v", _float, "0.0",
         "measurement noise sigma on recorded v_C [V]"),
    _Key("run.seed", _int, "7", "master seed for the whole run"),
    _Key("data.stride", _int, "47", "keep every n-th sample for training"),
    _Key("data.diff_mode", _choice(*DIFF_MODES), "consistent",
         "finite-difference target mode"),
    _Key("data.allow_literal", _bool, "false",
         "accept literal central differences despite the factor-2 scale"),
    _Key("net.grid_intervals", _int, "1", "spline grid intervals per edge"),
    _Key("net.spline_order", _int, "1", "B-spline order"),
    _Key("net.grid_margin", _float, "0.05",
         "grid widening beyond the observed input range, per side"),
    _Key("net.hidden", _int_tuple, "",
         "hidden layer widths, comma separated (empty = none)"),
    _Key("train.steps", _int, "240", "optimizer steps"),
    _Key("train.lamb", _float, "0.01", "sparsity penalty weight"),
    _Key("train.lamb_entropy", _float, "10.0",
         "entropy term weight inside the penalty"),
    _Key("train.memory", _int, "40", "L-BFGS history pairs"),
    _Key("train.c1", _float, "1e-4", "Wolfe sufficient-decrease constant"),
    _Key("train.c2", _float, "0.9", "Wolfe curvature constant"),
    _Key("train.max_line_search", _int, "25",
         "function evaluations allowed per line search"),
    _Key("train.grad_tol", _float, "1e-9",
         "stop when the max-abs gradient entry drops below this"),
    _Key("train.reduction", _choice("mean", "sum"), "sum",
         "loss reduction over the batch"),
    _Key("extract.fade_threshold", _float, "1e-3",
         "fade inputs whose edge activity is below this fraction of the "
         "dominant input"),
    _Key("extract.r2_accept", _float, "0.99",
         "minimum R^2 to snap an edge to a primitive"),
    _Key("extract.library", _str_tuple, ",".join(DEFAULT_LIBRARY),
         "candidate primitives for symbolic fits"),
)

_BY_NAME = {k.name: k for k in KEYS}


def config_help_lines() -> list[str]:
    width = max(len(k.name) for k in KEYS)
    return [f"  {k.name:<{width}}  (default {k.default}) {k.help}"
            for k in KEYS]


def parse_config_text(text: str, source: str = "<config>") -> dict:
    """Raw key -> value-string mapping; later duplicates win."""
    raw = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        key, sep, value = body.partition("=")
        if not sep:
            raise ConfigError(
                f"{source}:{lineno}: expected 'key = value', got {line!r}")
        key = key.strip()
        if key not in _BY_NAME:
            raise ConfigError(f"{source}:{lineno}: unknown config key "
                              f"'{key}'")
        raw[key] = value.strip()
    return raw


def parse_config_file(path) -> dict:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config_text(fh.read(), source=str(path))


def apply_overrides(raw: dict, assignments) -> dict:
    out = dict(raw)
    for item in assignments:
        key, sep, value = item.partition("=")
        key = key.strip()
        if not sep:
            raise ConfigError(
                f"--set needs key=value, got {item!r}")
        if key not in _BY_NAME:
            raise ConfigError(f"unknown config key '{key}'")
        out[key] = value.strip()
    return out


def _value(raw: dict, name: str):
    key = _BY_NAME[name]
    text = raw.get(name, key.default)
    try:
        return key.parse(text)
    except ConfigError:
        raise
    except Exception as exc:
        raise ConfigError(f"bad value for {name}: {text!r} ({exc})")


def build_setup(raw: dict) -> tuple[BuckParams, PipelineConfig]:
    """Resolve raw strings into validated parameter objects."""
    v = {k.name: _value(raw, k.name) for k in KEYS}
    try:
        params = BuckParams(
            v_in=v["plant.v_in"], inductance=v["plant.inductance"],
            capacitance=v["plant.capacitance"], load_r=v["plant.load_r"],
            r_l=v["plant.r_l"], r_c=v["plant.r_c"], r_on=v["plant.r_on"],
            f_sw=v["plant.f_sw"])
        train = TrainConfig(
            steps=v["train.steps"], lamb=v["train.lamb"],
            lamb_entropy=v["train.lamb_entropy"], memory=v["train.memory"],
            c1=v["train.c1"], c2=v["train.c2"],
            max_line_search=v["train.max_line_search"],
            grad_tol=v["train.grad_tol"], reduction=v["train.reduction"])
        cfg = PipelineConfig(
            train=train,
            stride=v["data.stride"], diff_mode=v["data.diff_mode"],
            allow_literal=v["data.allow_literal"],
            grid_intervals=v["net.grid_intervals"],
            spline_order=v["net.spline_order"],
            grid_margin=v["net.grid_margin"], hidden=v["net.hidden"],
            fade_threshold=v["extract.fade_threshold"],
            r2_accept=v["extract.r2_accept"], library=v["extract.library"],
            duration_seconds=v["run.duration_seconds"],
            noise_i=v["run.noise_i"], noise_v=v["run.noise_v"],
            kp=v["controller.kp"], ki=v["controller.ki"],
            reference=v["run.reference"],
            validation_reference=v["run.validation_reference"],
            seed=v["run.seed"])
        cfg.validate()
    except ValueError as exc:
        raise ConfigError(str(exc))
    return params, cfg


def load_setup(config_arg, assignments=(),
               seed_override: int | None = None):
    """Config path (or None/'default') plus overrides -> built setup."""
    if config_arg in (None, "default"):
        raw = {}
    else:
        raw = parse_config_file(config_arg)
    raw = apply_overrides(raw, assignments)
    params, cfg = build_setup(raw)
    if seed_override is not None:
        cfg = replace(cfg, seed=int(seed_override))
    return params, cfg
