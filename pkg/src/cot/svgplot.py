"""Tiny deterministic SVG line plots for experiment reports.

No plotting dependency: reports render as self-contained SVG with axes,
ticks, polylines and a legend. Output bytes depend only on the input data,
so rerunning an experiment reproduces the plot file exactly.
"""

from __future__ import annotations

import math

__all__ = ["Series", "line_plot"]

_PALETTE = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"]

_W, _H = 640, 420
_ML, _MR, _MT, _MB = 70, 20, 40, 55  # margins


class Series:
    def __init__(self, label: str, xs, ys, marker: bool = False):
        self.label = label
        self.xs = [float(v) for v in xs]
        self.ys = [float(v) for v in ys]
        if len(self.xs) != len(self.ys):
            raise ValueError("series xs and ys must have equal length")
        self.marker = marker


def _fmt(v: float) -> str:
    if v == int(v) and abs(v) < 1e6:
        return str(int(v))
    return f"{v:.4g}"


def _ticks(lo: float, hi: float, n: int = 5):
    if not math.isfinite(lo) or not math.isfinite(hi):
        lo, hi = 0.0, 1.0
    if hi <= lo:
        hi = lo + 1.0
    raw = (hi - lo) / n
    mag = 10.0 ** math.floor(math.log10(raw))
    for mult in (1.0, 2.0, 2.5, 5.0, 10.0):
        if raw <= mult * mag:
            step = mult * mag
            break
    start = math.ceil(lo / step) * step
    ticks = []
    t = start
    while t <= hi + 1e-12 * abs(hi):
        ticks.append(0.0 if abs(t) < step * 1e-9 else t)
        t += step
    return ticks


def line_plot(series: list, title: str = "", xlabel: str = "", ylabel: str = "",
              logy: bool = False) -> str:
    """Render series as one SVG document string."""
    xs = [x for s in series for x in s.xs]
    ys = [y for s in series for y in s.ys]
    if logy:
        ys = [math.log10(y) for y in ys if y > 0]
    if xs:
        x_lo, x_hi = min(xs), max(xs)
        y_lo, y_hi = (min(ys), max(ys)) if ys else (0.0, 1.0)
        if x_hi == x_lo:
            x_lo, x_hi = x_lo - 0.5, x_hi + 0.5
        if y_hi == y_lo:
            y_lo, y_hi = y_lo - 0.5, y_hi + 0.5
        pad = 0.04 * (y_hi - y_lo)
        y_lo, y_hi = y_lo - pad, y_hi + pad
    else:
        x_lo, x_hi, y_lo, y_hi = 0.0, 1.0, 0.0, 1.0

    pw, ph = _W - _ML - _MR, _H - _MT - _MB

    def px(x):
        return _ML + pw * (x - x_lo) / (x_hi - x_lo)

    def py(y):
        return _MT + ph * (1.0 - (y - y_lo) / (y_hi - y_lo))

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_W}" height="{_H}" '
        f'viewBox="0 0 {_W} {_H}" font-family="sans-serif" font-size="12">',
        f'<rect width="{_W}" height="{_H}" fill="white"/>',
        f'<rect x="{_ML}" y="{_MT}" width="{pw}" height="{ph}" fill="none" '
        'stroke="black" stroke-width="1"/>',
    ]
    if title:
        out.append(f'<text x="{_W / 2:.1f}" y="24" text-anchor="middle" '
                   f'font-size="15">{title}</text>')
    for t in _ticks(x_lo, x_hi):
        X = px(t)
        out.append(f'<line x1="{X:.2f}" y1="{_MT + ph}" x2="{X:.2f}" '
                   f'y2="{_MT + ph + 5}" stroke="black"/>')
        out.append(f'<text x="{X:.2f}" y="{_MT + ph + 18}" '
                   f'text-anchor="middle">{_fmt(t)}</text>')
    for t in _ticks(y_lo, y_hi):
        Y = py(t)
        label = _fmt(10.0 ** t) if logy else _fmt(t)
        out.append(f'<line x1="{_ML - 5}" y1="{Y:.2f}" x2="{_ML}" y2="{Y:.2f}" '
                   'stroke="black"/>')
        out.append(f'<text x="{_ML - 8}" y="{Y + 4:.2f}" '
                   f'text-anchor="end">{label}</text>')
    if xlabel:
        out.append(f'<text x="{_ML + pw / 2:.1f}" y="{_H - 14}" '
                   f'text-anchor="middle">{xlabel}</text>')
    if ylabel:
        out.append(f'<text x="18" y="{_MT + ph / 2:.1f}" text-anchor="middle" '
                   f'transform="rotate(-90 18 {_MT + ph / 2:.1f})">{ylabel}</text>')

    for si, s in enumerate(series):
        color = _PALETTE[si % len(_PALETTE)]
        pts = [(px(x), py(math.log10(y) if logy else y))
               for x, y in zip(s.xs, s.ys) if not logy or y > 0]
        if len(pts) > 1:
            path = " ".join(f"{x:.2f},{y:.2f}" for x, y in pts)
            out.append(f'<polyline points="{path}" fill="none" stroke="{color}" '
                       'stroke-width="1.5"/>')
        if s.marker or len(pts) == 1:
            for x, y in pts:
                out.append(f'<circle cx="{x:.2f}" cy="{y:.2f}" r="3" fill="{color}"/>')
        ly = _MT + 14 + 16 * si
        out.append(f'<line x1="{_ML + pw - 130}" y1="{ly - 4}" x2="{_ML + pw - 110}" '
                   f'y2="{ly - 4}" stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{_ML + pw - 105}" y="{ly}">{s.label}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
