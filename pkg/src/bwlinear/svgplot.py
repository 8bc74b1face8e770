"""Minimal SVG writers for diagnostic figures (line plots and heatmaps)."""

from __future__ import annotations

from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np
from numpy.typing import ArrayLike

__all__ = ["line_plot", "heatmap"]

_W, _H = 480, 360
_LEFT, _RIGHT, _TOP, _BOTTOM = 64, 16, 28, 48
_COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")


def _ticks(lo: float, hi: float, count: int = 5) -> list[float]:
    if hi <= lo:
        return [lo]
    return list(np.linspace(lo, hi, count))


def _frame(title: str, xlabel: str, ylabel: str) -> list[str]:
    return [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_W}" height="{_H}" font-family="sans-serif" font-size="11">',
        f'<rect width="{_W}" height="{_H}" fill="white"/>',
        f'<text x="{_W / 2}" y="16" text-anchor="middle" font-size="13">{escape(title)}</text>',
        f'<text x="{_W / 2}" y="{_H - 8}" text-anchor="middle">{escape(xlabel)}</text>',
        f'<text x="14" y="{_H / 2}" text-anchor="middle" transform="rotate(-90 14 {_H / 2})">{escape(ylabel)}</text>',
    ]


def line_plot(
    path: str | Path,
    series: dict[str, tuple[ArrayLike, ArrayLike]],
    title: str = "",
    xlabel: str = "",
    ylabel: str = "",
) -> None:
    """Write one polyline with markers per named ``(x, y)`` series."""
    xs = np.concatenate([np.asarray(x, float) for x, _ in series.values()])
    ys = np.concatenate([np.asarray(y, float) for _, y in series.values()])
    x0, x1 = float(xs.min()), float(xs.max())
    y0, y1 = float(ys.min()), float(ys.max())
    if x1 == x0:
        x0, x1 = x0 - 1, x1 + 1
    if y1 == y0:
        y0, y1 = y0 - 1, y1 + 1
    pw, ph = _W - _LEFT - _RIGHT, _H - _TOP - _BOTTOM

    def px(x):
        return _LEFT + (x - x0) / (x1 - x0) * pw

    def py(y):
        return _TOP + (y1 - y) / (y1 - y0) * ph

    out = _frame(title, xlabel, ylabel)
    out.append(f'<rect x="{_LEFT}" y="{_TOP}" width="{pw}" height="{ph}" fill="none" stroke="black"/>')
    for tx in _ticks(x0, x1):
        out.append(f'<text x="{px(tx):.1f}" y="{_TOP + ph + 14}" text-anchor="middle">{tx:.3g}</text>')
    for ty in _ticks(y0, y1):
        out.append(f'<text x="{_LEFT - 4}" y="{py(ty) + 4:.1f}" text-anchor="end">{ty:.3g}</text>')
    for i, (name, (x, y)) in enumerate(series.items()):
        color = _COLORS[i % len(_COLORS)]
        pts = " ".join(f"{px(a):.1f},{py(b):.1f}" for a, b in zip(np.asarray(x, float), np.asarray(y, float)))
        out.append(f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="1.5"/>')
        for a, b in zip(np.asarray(x, float), np.asarray(y, float)):
            out.append(f'<circle cx="{px(a):.1f}" cy="{py(b):.1f}" r="2.5" fill="{color}"/>')
        out.append(f'<text x="{_LEFT + 8}" y="{_TOP + 14 + 13 * i}" fill="{color}">{escape(name)}</text>')
    out.append("</svg>")
    Path(path).write_text("\n".join(out) + "\n")


def heatmap(
    path: str | Path,
    values: ArrayLike,
    xticks: ArrayLike,
    yticks: ArrayLike,
    title: str = "",
    xlabel: str = "",
    ylabel: str = "",
) -> None:
    """Write a grid of shaded cells; ``values[i, j]`` sits at ``(xticks[j], yticks[i])``."""
    v = np.asarray(values, float)
    lo, hi = float(np.nanmin(v)), float(np.nanmax(v))
    span = hi - lo if hi > lo else 1.0
    rows, cols = v.shape
    pw, ph = _W - _LEFT - _RIGHT, _H - _TOP - _BOTTOM
    cw, ch = pw / cols, ph / rows
    out = _frame(title, xlabel, ylabel)
    for i in range(rows):
        for j in range(cols):
            level = 0.0 if np.isnan(v[i, j]) else (v[i, j] - lo) / span
            shade = int(round(235 - 200 * level))
            x, y = _LEFT + j * cw, _TOP + (rows - 1 - i) * ch
            out.append(f'<rect x="{x:.1f}" y="{y:.1f}" width="{cw:.1f}" height="{ch:.1f}" fill="rgb({shade},{shade},255)"/>')
            out.append(f'<text x="{x + cw / 2:.1f}" y="{y + ch / 2 + 4:.1f}" text-anchor="middle">{v[i, j]:.3g}</text>')
    for j, tx in enumerate(np.asarray(xticks)):
        out.append(f'<text x="{_LEFT + (j + 0.5) * cw:.1f}" y="{_TOP + ph + 14}" text-anchor="middle">{float(tx):.4g}</text>')
    for i, ty in enumerate(np.asarray(yticks)):
        out.append(f'<text x="{_LEFT - 4}" y="{_TOP + (rows - 0.5 - i) * ch + 4:.1f}" text-anchor="end">{float(ty):.4g}</text>')
    out.append("</svg>")
    Path(path).write_text("\n".join(out) + "\n")
