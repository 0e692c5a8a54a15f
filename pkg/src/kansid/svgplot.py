"""Deterministic SVG line plots.

Byte-identical output for identical input: no timestamps, no library
version strings, fixed-precision coordinates, and a stable element order.
Axes and legend swatches are drawn with ``<line>`` so the data series are
the only ``<polyline>`` elements in the file.
"""

from __future__ import annotations

import math

import numpy as np

from .util import atomic_write_text

WIDTH = 960
HEIGHT = 480
MARGIN_LEFT = 70
MARGIN_RIGHT = 15
MARGIN_TOP = 15
MARGIN_BOTTOM = 45
MAX_POINTS = 2000
MAX_SERIES = 2

SERIES_COLORS = ("#1f77b4", "#d62728")

PLOT_KINDS = {
    "trajectory": ("time [s]", "signal"),
    "derivative_fit": ("sample", "per-sample difference"),
    "verification": ("time [s]", "output voltage [V]"),
}


def _nice_ticks(lo: float, hi: float, target: int = 6):
    span = hi - lo
    raw = span / max(target - 1, 1)
    mag = 10.0 ** math.floor(math.log10(raw))
    for mult in (1.0, 2.0, 2.5, 5.0, 10.0):
        step = mult * mag
        if span / step <= target - 1:
            break
    first = math.ceil(lo / step) * step
    ticks = []
    t = first
    while t <= hi + 1e-9 * span:
        ticks.append(0.0 if abs(t) < 1e-12 * span else t)
        t += step
    return ticks


def _escape(text: str) -> str:
    return (text.replace("&", "&amp;").replace("<", "&lt;")
            .replace(">", "&gt;"))


def emit_plot(kind: str, series, path, annotation: str | None = None) -> None:
    """Render up to two labeled (x, y) series to an SVG file.

    ``series`` is a list of ``(label, x, y)`` triples. Long series are
    thinned to at most ``MAX_POINTS`` points with a fixed stride, keeping
    the final point.
    """
    if kind not in PLOT_KINDS:
        raise ValueError(
            f"unknown plot kind '{kind}'; use one of {sorted(PLOT_KINDS)}")
    if not series or len(series) > MAX_SERIES:
        raise ValueError(
            f"need 1..{MAX_SERIES} series, got {len(series) if series else 0}")
    cleaned = []
    for label, xs, ys in series:
        xa = np.asarray(xs, dtype=float).ravel()
        ya = np.asarray(ys, dtype=float).ravel()
        if xa.size == 0 or xa.shape != ya.shape:
            raise ValueError(f"series '{label}' is empty or ragged")
        if not (np.all(np.isfinite(xa)) and np.all(np.isfinite(ya))):
            raise ValueError(f"series '{label}' has non-finite values")
        if xa.size > MAX_POINTS:
            stride = -(-xa.size // MAX_POINTS)
            keep = np.arange(0, xa.size, stride)
            if keep[-1] != xa.size - 1:
                keep = np.append(keep, xa.size - 1)
            xa, ya = xa[keep], ya[keep]
        cleaned.append((str(label), xa, ya))

    x_lo = min(float(xa.min()) for _, xa, _ in cleaned)
    x_hi = max(float(xa.max()) for _, xa, _ in cleaned)
    y_lo = min(float(ya.min()) for _, _, ya in cleaned)
    y_hi = max(float(ya.max()) for _, _, ya in cleaned)
    if x_hi <= x_lo:
        x_lo, x_hi = x_lo - 0.5, x_lo + 0.5
    if y_hi <= y_lo:
        pad = max(0.5, abs(y_lo) * 0.05)
        y_lo, y_hi = y_lo - pad, y_lo + pad
    else:
        pad = 0.05 * (y_hi - y_lo)
        y_lo, y_hi = y_lo - pad, y_hi + pad

    px0, px1 = MARGIN_LEFT, WIDTH - MARGIN_RIGHT
    py0, py1 = HEIGHT - MARGIN_BOTTOM, MARGIN_TOP

    def sx(x):
        return px0 + (x - x_lo) / (x_hi - x_lo) * (px1 - px0)

    def sy(y):
        return py0 + (y - y_lo) / (y_hi - y_lo) * (py1 - py0)

    xlabel, ylabel = PLOT_KINDS[kind]
    parts = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" '
        f'height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">',
        f'<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="#ffffff"/>',
    ]
    axis = 'stroke="#000000" stroke-width="1"'
    parts.append(f'<line x1="{px0}" y1="{py0}" x2="{px1}" y2="{py0}" {axis}/>')
    parts.append(f'<line x1="{px0}" y1="{py0}" x2="{px0}" y2="{py1}" {axis}/>')
    for t in _nice_ticks(x_lo, x_hi):
        x = sx(t)
        parts.append(f'<line x1="{x:.2f}" y1="{py0}" x2="{x:.2f}" '
                     f'y2="{py0 + 5}" {axis}/>')
        parts.append(f'<text x="{x:.2f}" y="{py0 + 20}" font-family="sans-serif" '
                     f'font-size="12" text-anchor="middle">{t:.6g}</text>')
    for t in _nice_ticks(y_lo, y_hi):
        y = sy(t)
        parts.append(f'<line x1="{px0 - 5}" y1="{y:.2f}" x2="{px0}" '
                     f'y2="{y:.2f}" {axis}/>')
        parts.append(f'<text x="{px0 - 8}" y="{y + 4:.2f}" font-family="sans-serif" '
                     f'font-size="12" text-anchor="end">{t:.6g}</text>')
    parts.append(f'<text x="{(px0 + px1) / 2:.2f}" y="{HEIGHT - 8}" '
                 f'font-family="sans-serif" font-size="13" '
                 f'text-anchor="middle">{_escape(xlabel)}</text>')
    parts.append(f'<text x="16" y="{(py0 + py1) / 2:.2f}" '
                 f'font-family="sans-serif" font-size="13" '
                 f'text-anchor="middle" transform="rotate(-90 16 '
                 f'{(py0 + py1) / 2:.2f})">{_escape(ylabel)}</text>')
    for (label, xa, ya), color in zip(cleaned, SERIES_COLORS):
        pts = " ".join(f"{sx(x):.2f},{sy(y):.2f}" for x, y in zip(xa, ya))
        parts.append(f'<polyline fill="none" stroke="{color}" '
                     f'stroke-width="1.5" points="{pts}"/>')
    lx = px1 - 180
    ly = py1 + 14
    for idx, ((label, _, _), color) in enumerate(zip(cleaned, SERIES_COLORS)):
        y = ly + idx * 18
        parts.append(f'<line x1="{lx}" y1="{y - 4}" x2="{lx + 26}" '
                     f'y2="{y - 4}" stroke="{color}" stroke-width="1.5"/>')
        parts.append(f'<text x="{lx + 32}" y="{y}" font-family="sans-serif" '
                     f'font-size="12">{_escape(label)}</text>')
    if annotation:
        parts.append(f'<text x="{px0 + 10}" y="{py1 + 16}" '
                     f'font-family="sans-serif" font-size="12">'
                     f'{_escape(annotation)}</text>')
    parts.append("</svg>")
    atomic_write_text(path, "\n".join(parts) + "\n")
