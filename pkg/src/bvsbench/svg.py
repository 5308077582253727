"""Minimal deterministic SVG line plots.

Hand-rolled on purpose: byte-identical output for identical data, no
timestamps or generated ids, so plot files can be diffed and hashed.
"""

from __future__ import annotations

import math
from pathlib import Path

__all__ = ["line_plot"]

_W, _H = 640, 420
_ML, _MR, _MT, _MB = 64, 16, 28, 44
_COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")


def _fmt(v: float) -> str:
    return f"{v:.6g}"


def _ticks(lo: float, hi: float, n: int = 5) -> list[float]:
    if hi <= lo:
        hi = lo + 1.0
    raw = (hi - lo) / n
    mag = 10 ** math.floor(math.log10(raw))
    step = min(s * mag for s in (1, 2, 5, 10) if s * mag >= raw)
    first = math.ceil(lo / step) * step
    out = []
    t = first
    while t <= hi + 1e-12 * abs(step):
        out.append(round(t, 12))
        t += step
    return out


def line_plot(
    path: str | Path,
    x: list[float],
    series: dict[str, list[float | None]],
    title: str = "",
    x_label: str = "",
    y_label: str = "",
) -> None:
    """Write one SVG with a polyline per series; None values break the line."""
    pts = [float(v) for v in x]
    ys = [float(v) for col in series.values() for v in col if v is not None]
    if not pts or not ys:
        pts, ys = [0.0, 1.0], [0.0, 1.0]
    x_lo, x_hi = min(pts), max(pts)
    y_lo, y_hi = min(ys), max(ys)
    if x_hi == x_lo:
        x_hi = x_lo + 1.0
    if y_hi == y_lo:
        y_hi = y_lo + 1.0
    pad = 0.05 * (y_hi - y_lo)
    y_lo, y_hi = y_lo - pad, y_hi + pad

    def sx(v: float) -> float:
        return _ML + (v - x_lo) / (x_hi - x_lo) * (_W - _ML - _MR)

    def sy(v: float) -> float:
        return _H - _MB - (v - y_lo) / (y_hi - y_lo) * (_H - _MT - _MB)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_W}" height="{_H}" '
        f'viewBox="0 0 {_W} {_H}">',
        f'<rect width="{_W}" height="{_H}" fill="white"/>',
        f'<text x="{_W // 2}" y="18" text-anchor="middle" font-family="monospace" '
        f'font-size="13">{title}</text>',
    ]
    for t in _ticks(x_lo, x_hi):
        px = sx(t)
        parts.append(
            f'<line x1="{_fmt(px)}" y1="{_H - _MB}" x2="{_fmt(px)}" y2="{_MT}" '
            f'stroke="#dddddd" stroke-width="1"/>'
        )
        parts.append(
            f'<text x="{_fmt(px)}" y="{_H - _MB + 16}" text-anchor="middle" '
            f'font-family="monospace" font-size="10">{_fmt(t)}</text>'
        )
    for t in _ticks(y_lo, y_hi):
        py = sy(t)
        parts.append(
            f'<line x1="{_ML}" y1="{_fmt(py)}" x2="{_W - _MR}" y2="{_fmt(py)}" '
            f'stroke="#dddddd" stroke-width="1"/>'
        )
        parts.append(
            f'<text x="{_ML - 6}" y="{_fmt(py + 3)}" text-anchor="end" '
            f'font-family="monospace" font-size="10">{_fmt(t)}</text>'
        )
    parts.append(
        f'<rect x="{_ML}" y="{_MT}" width="{_W - _ML - _MR}" height="{_H - _MT - _MB}" '
        f'fill="none" stroke="#333333"/>'
    )
    parts.append(
        f'<text x="{_W // 2}" y="{_H - 8}" text-anchor="middle" font-family="monospace" '
        f'font-size="11">{x_label}</text>'
    )
    parts.append(
        f'<text x="14" y="{_H // 2}" text-anchor="middle" font-family="monospace" '
        f'font-size="11" transform="rotate(-90 14 {_H // 2})">{y_label}</text>'
    )
    for i, (name, col) in enumerate(series.items()):
        color = _COLORS[i % len(_COLORS)]
        run: list[str] = []
        runs: list[list[str]] = []
        for xv, yv in zip(pts, col):
            if yv is None:
                if run:
                    runs.append(run)
                    run = []
                continue
            run.append(f"{_fmt(sx(xv))},{_fmt(sy(float(yv)))}")
        if run:
            runs.append(run)
        for r in runs:
            if len(r) == 1:
                cx, cy = r[0].split(",")
                parts.append(f'<circle cx="{cx}" cy="{cy}" r="2.5" fill="{color}"/>')
            else:
                parts.append(
                    f'<polyline points="{" ".join(r)}" fill="none" stroke="{color}" '
                    f'stroke-width="1.5"/>'
                )
        parts.append(
            f'<text x="{_W - _MR - 6}" y="{_MT + 14 + 13 * i}" text-anchor="end" '
            f'font-family="monospace" font-size="10" fill="{color}">{name}</text>'
        )
    parts.append("</svg>")
    Path(path).write_text("\n".join(parts) + "\n")
