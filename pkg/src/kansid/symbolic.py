"""Symbolic primitives, affine-wrapped fitting, and closed-form equations.

An edge can be snapped to ``c * f(a*x + b) + d`` where ``f`` is one of a
small library of primitives. Fitting searches ``(a, b)`` on a coarse-to-fine
grid and solves ``(c, d)`` by linear least squares at each candidate; for
``linear`` and ``constant`` the inner pair is fixed at ``(1, 0)`` and the
whole fit is exact least squares.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import NotSymbolicError


@dataclass(frozen=True)
class Primitive:
    name: str
    fn: callable
    deriv: callable
    complexity: int
    # Primitives whose affine fold is itself affine in x.
    affine: bool


PRIMITIVES: dict[str, Primitive] = {
    "zero": Primitive("zero", lambda x: np.zeros_like(x),
                      lambda x: np.zeros_like(x), 0, True),
    "constant": Primitive("constant", lambda x: np.ones_like(x),
                          lambda x: np.zeros_like(x), 1, True),
    "linear": Primitive("linear", lambda x: x,
                        lambda x: np.ones_like(x), 2, True),
    "square": Primitive("square", lambda x: x * x,
                        lambda x: 2.0 * x, 3, False),
    "sine": Primitive("sine", np.sin, np.cos, 4, False),
    "exponential": Primitive("exponential", np.exp, np.exp, 5, False),
}

DEFAULT_LIBRARY = ("zero", "constant", "linear", "square", "sine",
                   "exponential")


@dataclass
class SymbolicOverride:
    """Frozen form ``c * f(a*x + b) + d`` attached to an edge."""

    primitive: str
    a: float = 1.0
    b: float = 0.0
    c: float = 1.0
    d: float = 0.0

    def eval(self, x):
        f = PRIMITIVES[self.primitive].fn
        return self.c * f(self.a * np.asarray(x, dtype=float) + self.b) + self.d

    def eval_deriv(self, x):
        df = PRIMITIVES[self.primitive].deriv
        return self.c * self.a * df(self.a * np.asarray(x, dtype=float) + self.b)


@dataclass
class SymbolicFit:
    """One fitted candidate from :func:`suggest_primitives`."""

    primitive: str
    a: float
    b: float
    c: float
    d: float
    r2: float           # NaN when the targets have zero variance
    ss_res: float

    @property
    def r2_defined(self) -> bool:
        return not math.isnan(self.r2)

    def as_override(self) -> SymbolicOverride:
        return SymbolicOverride(self.primitive, self.a, self.b, self.c, self.d)


def r_squared(y, y_hat):
    """Coefficient of determination; NaN when ``y`` has zero variance."""
    y = np.asarray(y, dtype=float)
    y_hat = np.asarray(y_hat, dtype=float)
    ss_res = float(np.sum((y - y_hat) ** 2))
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    if ss_tot == 0.0:
        return math.nan
    return 1.0 - ss_res / ss_tot


def _affine_lstsq(z, y):
    """Least-squares ``c*z + d`` fit; returns (c, d, ss_res)."""
    design = np.column_stack([z, np.ones_like(z)])
    sol, _, _, _ = np.linalg.lstsq(design, y, rcond=None)
    resid = y - design @ sol
    return float(sol[0]), float(sol[1]), float(resid @ resid)


def fit_primitive(x, y, name: str) -> SymbolicFit:
    """Best affine-wrapped fit of one primitive to samples ``(x, y)``."""
    if name not in PRIMITIVES:
        raise ValueError(f"unknown primitive '{name}'; "
                         f"choose from {sorted(PRIMITIVES)}")
    x = np.asarray(x, dtype=float).ravel()
    y = np.asarray(y, dtype=float).ravel()
    if x.shape != y.shape:
        raise ValueError("x and y sample counts differ")
    if x.size < 10:
        raise ValueError(f"need at least 10 sample pairs, got {x.size}")

    if name == "zero":
        ss_res = float(y @ y)
        return SymbolicFit("zero", 1.0, 0.0, 0.0, 0.0,
                           r_squared(y, np.zeros_like(y)), ss_res)
    if name == "constant":
        d = float(y.mean())
        ss_res = float(np.sum((y - d) ** 2))
        return SymbolicFit("constant", 1.0, 0.0, 0.0, d,
                           r_squared(y, np.full_like(y, d)), ss_res)
    if name == "linear":
        c, d, ss_res = _affine_lstsq(x, y)
        return SymbolicFit("linear", 1.0, 0.0, c, d,
                           r_squared(y, c * x + d), ss_res)

    fn = PRIMITIVES[name].fn
    best = None  # (ss_res, a, b, c, d)
    a_lo, a_hi, b_lo, b_hi = -5.0, 5.0, -5.0, 5.0
    for level in range(3):
        n_pts = 21 if level == 0 else 11
        a_cands = np.linspace(a_lo, a_hi, n_pts)
        b_cands = np.linspace(b_lo, b_hi, n_pts)
        for a in a_cands:
            with np.errstate(over="ignore", invalid="ignore"):
                zs = fn(a * x[None, :] + b_cands[:, None])
            for b, z in zip(b_cands, zs):
                if not np.all(np.isfinite(z)):
                    continue
                if np.ptp(z) == 0.0:
                    d = float(y.mean())
                    ss = float(np.sum((y - d) ** 2))
                    cand = (ss, float(a), float(b), 0.0, d)
                else:
                    c, d, ss = _affine_lstsq(z, y)
                    if not (math.isfinite(c) and math.isfinite(d)):
                        continue
                    cand = (ss, float(a), float(b), c, d)
                if best is None or cand[0] < best[0]:
                    best = cand
        if best is None:
            break
        # Zoom in around the incumbent (a, b) for the next level.
        da = (a_hi - a_lo) / (n_pts - 1)
        db = (b_hi - b_lo) / (n_pts - 1)
        a_lo, a_hi = best[1] - da, best[1] + da
        b_lo, b_hi = best[2] - db, best[2] + db
    if best is None:
        return SymbolicFit(name, 1.0, 0.0, 0.0, 0.0, -math.inf, math.inf)
    ss, a, b, c, d = best
    with np.errstate(over="ignore", invalid="ignore"):
        y_hat = c * fn(a * x + b) + d
    return SymbolicFit(name, a, b, c, d, r_squared(y, y_hat), ss)


# R^2 differences below this resolution are treated as ties. Estimated from
# finite samples, R^2 carries at least this much uncertainty, and flexible
# primitives (sine with a -> 0, square with a distant vertex) can mimic a
# straight line to within it; without the band the mimic would always
# outrank the genuinely simpler candidate.
R2_RESOLUTION = 1e-5


def suggest_primitives(x, y, library=DEFAULT_LIBRARY) -> list[SymbolicFit]:
    """Fit every primitive in ``library`` and rank best-first.

    Ranking is by R^2 descending; candidates within ``R2_RESOLUTION`` of the
    best R^2 are tied with it and ordered by ascending complexity. When the
    targets have zero variance R^2 is undefined for every candidate, so the
    ranking falls back to residual sum of squares then complexity (which
    puts ``zero``/``constant`` first for flat targets).
    """
    if not library:
        raise ValueError("primitive library is empty")
    fits = [fit_primitive(x, y, name) for name in library]
    flat_targets = not fits[0].r2_defined

    if flat_targets:
        return sorted(fits, key=lambda fit: (
            fit.ss_res, PRIMITIVES[fit.primitive].complexity))
    best_r2 = max((f.r2 for f in fits if math.isfinite(f.r2)),
                  default=-math.inf)

    def key(fit: SymbolicFit):
        comp = PRIMITIVES[fit.primitive].complexity
        if not math.isfinite(fit.r2):
            return (1, math.inf, comp)
        tied_with_best = fit.r2 >= best_r2 - R2_RESOLUTION
        return (0 if tied_with_best else 1, -fit.r2 if not tied_with_best
                else 0.0, comp)

    return sorted(fits, key=key)


@dataclass
class SymbolicEquation:
    """Affine law ``x_dot = sum(slope_i * g_i) + constant`` for one state."""

    state_label: str
    slopes: dict[str, float]
    constant: float
    scale_applied: bool = False
    edge_r2: dict[str, float | None] = field(default_factory=dict)

    def evaluate(self, inputs) -> float:
        """Evaluate at one point; ``inputs`` maps labels to values."""
        if set(inputs) != set(self.slopes):
            raise ValueError(
                f"inputs {sorted(inputs)} do not match equation "
                f"labels {sorted(self.slopes)}")
        return sum(self.slopes[k] * inputs[k] for k in self.slopes) + self.constant

    def scaled(self, factor: float) -> "SymbolicEquation":
        """Multiply every coefficient by ``factor``, marking the rescale."""
        return replace(
            self,
            slopes={k: v * factor for k, v in self.slopes.items()},
            constant=self.constant * factor,
            scale_applied=True,
        )


def fold_affine_layers(layer_maps, input_labels, state_label="",
                       edge_r2=None) -> SymbolicEquation:
    """Compose per-layer affine maps ``(W, b)`` into one equation.

    ``layer_maps`` is ordered input-side first; composition is
    ``(W2, b2) o (W1, b1) = (W2 @ W1, W2 @ b1 + b2)`` and the final map must
    have a single output row.
    """
    w, b = layer_maps[0]
    for w_next, b_next in layer_maps[1:]:
        b = w_next @ b + b_next
        w = w_next @ w
    if w.shape[0] != 1:
        raise NotSymbolicError(
            f"folded map has {w.shape[0]} outputs, expected 1")
    slopes = {lab: float(w[0, i]) for i, lab in enumerate(input_labels)}
    return SymbolicEquation(state_label=state_label, slopes=slopes,
                            constant=float(b[0]),
                            edge_r2=dict(edge_r2 or {}))
