"""Uniform B-spline grids and vectorized basis evaluation.

A grid of order ``k`` with ``G`` intervals over ``[range_min, range_max]``
carries ``G + 2k + 1`` knots (the core interval endpoints plus ``k`` extra
uniform spacings on each side) and supports ``G + k`` basis functions.

Outside the core range the bases are continued by the boundary polynomial
piece: evaluation clamps the knot span to the core intervals, so partition
of unity and the zero derivative-sum identity hold on the whole real line.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateDataError


@dataclass(frozen=True)
class SplineGrid:
    """Immutable description of a uniform B-spline basis."""

    order: int
    num_intervals: int
    range_min: float
    range_max: float
    knots: np.ndarray

    @property
    def num_basis(self) -> int:
        return self.num_intervals + self.order

    @property
    def spacing(self) -> float:
        return (self.range_max - self.range_min) / self.num_intervals

    def __eq__(self, other):
        if not isinstance(other, SplineGrid):
            return NotImplemented
        return (
            self.order == other.order
            and self.num_intervals == other.num_intervals
            and self.range_min == other.range_min
            and self.range_max == other.range_max
        )


def make_uniform_grid(range_min: float, range_max: float,
                      num_intervals: int = 5, order: int = 3) -> SplineGrid:
    """Build a uniform grid; knots extend ``order`` spacings past each end."""
    if not (np.isfinite(range_min) and np.isfinite(range_max)):
        raise ValueError("grid range must be finite")
    if range_max <= range_min:
        raise ValueError(
            f"grid range is empty: [{range_min}, {range_max}]")
    if num_intervals < 1:
        raise ValueError(f"num_intervals must be >= 1, got {num_intervals}")
    if order < 0:
        raise ValueError(f"order must be >= 0, got {order}")
    h = (range_max - range_min) / num_intervals
    core = np.linspace(range_min, range_max, num_intervals + 1)
    left = range_min - h * np.arange(order, 0, -1)
    right = range_max + h * np.arange(1, order + 1)
    knots = np.concatenate([left, core, right])
    return SplineGrid(order=int(order), num_intervals=int(num_intervals),
                      range_min=float(range_min), range_max=float(range_max),
                      knots=knots)


def grid_from_samples(samples, num_intervals: int = 5, order: int = 3,
                      margin_fraction: float = 0.05,
                      label: str = "samples") -> SplineGrid:
    """Grid spanning observed data, widened by ``margin_fraction`` per side."""
    x = np.asarray(samples, dtype=float)
    if x.size == 0:
        raise DegenerateDataError(f"no samples for column '{label}'")
    if not np.all(np.isfinite(x)):
        raise ValueError(f"non-finite samples in column '{label}'")
    if margin_fraction < 0:
        raise ValueError("margin_fraction must be >= 0")
    lo = float(x.min())
    hi = float(x.max())
    if hi <= lo:
        raise DegenerateDataError(
            f"column '{label}' is constant ({lo}); cannot span a grid")
    pad = margin_fraction * (hi - lo)
    return make_uniform_grid(lo - pad, hi + pad, num_intervals, order)


def _span_indices(grid: SplineGrid, x: np.ndarray) -> np.ndarray:
    # Knot span j satisfies knots[j] <= x < knots[j+1]; clamping to the core
    # spans [k, G+k-1] selects the boundary piece for out-of-range inputs.
    j = np.searchsorted(grid.knots, x, side="right") - 1
    return np.clip(j, grid.order, grid.num_intervals + grid.order - 1)


def _basis_to_degree(grid: SplineGrid, x: np.ndarray, degree: int) -> np.ndarray:
    """Cox-de Boor recursion carried up to ``degree`` for a 1-D batch."""
    t = grid.knots
    n_spans = len(t) - 1
    j = _span_indices(grid, x)
    b = (j[:, None] == np.arange(n_spans)[None, :]).astype(float)
    xc = x[:, None]
    for d in range(1, degree + 1):
        n = n_spans - d
        left = (xc - t[None, :n]) / (t[d:d + n] - t[:n])[None, :]
        right = (t[None, d + 1:d + 1 + n] - xc) / (t[d + 1:d + 1 + n] - t[1:1 + n])[None, :]
        b = left * b[:, :n] + right * b[:, 1:n + 1]
    return b


def basis_matrix(grid: SplineGrid, x) -> np.ndarray:
    """Values of all ``G + k`` bases at each point; shape ``(N, G + k)``."""
    xa = np.ascontiguousarray(x, dtype=float).ravel()
    return _basis_to_degree(grid, xa, grid.order)


def basis_derivative_matrix(grid: SplineGrid, x) -> np.ndarray:
    """First derivatives of all bases at each point; shape ``(N, G + k)``."""
    xa = np.ascontiguousarray(x, dtype=float).ravel()
    k = grid.order
    if k == 0:
        return np.zeros((xa.size, grid.num_basis))
    t = grid.knots
    lower = _basis_to_degree(grid, xa, k - 1)  # (N, G + k + 1)
    # d/dx B_{i,k} = k * (B_{i,k-1}/(t[i+k]-t[i]) - B_{i+1,k-1}/(t[i+k+1]-t[i+1]))
    scaled = lower / (t[k:] - t[:-k])[None, :]
    return k * (scaled[:, :-1] - scaled[:, 1:])


def basis_values(grid: SplineGrid, x):
    """Like :func:`basis_matrix` but a scalar ``x`` yields a 1-D vector."""
    if np.ndim(x) == 0:
        return basis_matrix(grid, np.array([x]))[0]
    return basis_matrix(grid, x)


def basis_derivatives(grid: SplineGrid, x):
    """Like :func:`basis_derivative_matrix`; scalar input, 1-D output."""
    if np.ndim(x) == 0:
        return basis_derivative_matrix(grid, np.array([x]))[0]
    return basis_derivative_matrix(grid, x)
