"""Minimal SVG line plots: axes, ticks, labeled polylines, nothing else.

CSV files remain the canonical record of every run; these plots exist so a
grid of curves can be eyeballed without any plotting dependency.  Output is
deterministic (same data, same bytes), which keeps manifests honest.
"""

from __future__ import annotations

import math
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigError

# dark, print-safe series colors, cycled
PALETTE = ("#1b6ca8", "#c0392b", "#1e8449", "#8e44ad", "#b07f00", "#36454f")

_MARGIN_L = 64.0
_MARGIN_R = 16.0
_MARGIN_T = 34.0
_MARGIN_B = 46.0


def _fmt(v: float) -> str:
    return f"{v:.6g}"


def _ticks(lo: float, hi: float, want: int = 5) -> Sequence[float]:
    """Round tick positions covering [lo, hi] (1/2/5 ladder)."""
    if not (math.isfinite(lo) and math.isfinite(hi)):
        raise ConfigError("axis limits must be finite")
    if hi <= lo:
        hi = lo + (abs(lo) if lo != 0.0 else 1.0)
    raw = (hi - lo) / max(want - 1, 1)
    mag = 10.0 ** math.floor(math.log10(raw))
    for mult in (1.0, 2.0, 5.0, 10.0):
        step = mult * mag
        if step >= raw:
            break
    first = math.ceil(lo / step) * step
    out = []
    v = first
    while v <= hi + 1e-9 * step:
        out.append(0.0 if abs(v) < 1e-12 * step else v)
        v += step
    return out


def line_plot(
    xs,
    series,
    labels: Optional[Sequence[str]] = None,
    title: str = "",
    x_label: str = "",
    y_label: str = "",
    width: int = 560,
    height: int = 360,
) -> str:
    """Render one or more curves over a shared x grid; returns SVG text.

    `series` is a sequence of y arrays, each the same length as `xs`.
    Non-finite y values break the polyline rather than being dropped, so a
    divergence in a training curve stays visible as a gap.
    """
    xs = np.asarray(xs, dtype=float)
    ys_list = [np.asarray(y, dtype=float) for y in series]
    if xs.ndim != 1 or xs.size < 2:
        raise ConfigError("need a 1-D x grid with at least 2 points")
    if not ys_list:
        raise ConfigError("need at least one series")
    for y in ys_list:
        if y.shape != xs.shape:
            raise ConfigError("every series must match the x grid's length")
    if labels is not None and len(labels) != len(ys_list):
        raise ConfigError("one label per series")

    x_lo, x_hi = float(xs.min()), float(xs.max())
    finite = np.concatenate([y[np.isfinite(y)] for y in ys_list])
    if finite.size == 0:
        raise ConfigError("all series values are non-finite")
    y_lo, y_hi = float(finite.min()), float(finite.max())
    if y_hi == y_lo:
        pad = abs(y_lo) if y_lo != 0.0 else 1.0
        y_lo, y_hi = y_lo - 0.5 * pad, y_hi + 0.5 * pad
    else:
        pad = 0.05 * (y_hi - y_lo)
        y_lo, y_hi = y_lo - pad, y_hi + pad

    plot_w = width - _MARGIN_L - _MARGIN_R
    plot_h = height - _MARGIN_T - _MARGIN_B

    def px(v: float) -> float:
        return _MARGIN_L + (v - x_lo) / (x_hi - x_lo) * plot_w

    def py(v: float) -> float:
        return _MARGIN_T + (y_hi - v) / (y_hi - y_lo) * plot_h

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" font-family="monospace" font-size="11">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
    ]
    if title:
        parts.append(
            f'<text x="{width / 2:.1f}" y="18" text-anchor="middle" font-size="13">{_esc(title)}</text>'
        )

    # frame and ticks
    x0, y0 = _MARGIN_L, _MARGIN_T + plot_h
    parts.append(
        f'<rect x="{_MARGIN_L:.1f}" y="{_MARGIN_T:.1f}" width="{plot_w:.1f}" '
        f'height="{plot_h:.1f}" fill="none" stroke="#333" stroke-width="1"/>'
    )
    for tx in _ticks(x_lo, x_hi):
        X = px(tx)
        parts.append(f'<line x1="{X:.1f}" y1="{y0:.1f}" x2="{X:.1f}" y2="{y0 + 4:.1f}" stroke="#333"/>')
        parts.append(f'<text x="{X:.1f}" y="{y0 + 16:.1f}" text-anchor="middle">{_fmt(tx)}</text>')
    for ty in _ticks(y_lo, y_hi):
        Y = py(ty)
        parts.append(f'<line x1="{x0 - 4:.1f}" y1="{Y:.1f}" x2="{x0:.1f}" y2="{Y:.1f}" stroke="#333"/>')
        parts.append(f'<text x="{x0 - 7:.1f}" y="{Y + 3.5:.1f}" text-anchor="end">{_fmt(ty)}</text>')
    if x_label:
        parts.append(
            f'<text x="{_MARGIN_L + plot_w / 2:.1f}" y="{height - 10:.1f}" '
            f'text-anchor="middle">{_esc(x_label)}</text>'
        )
    if y_label:
        cy = _MARGIN_T + plot_h / 2
        parts.append(
            f'<text x="14" y="{cy:.1f}" text-anchor="middle" '
            f'transform="rotate(-90 14 {cy:.1f})">{_esc(y_label)}</text>'
        )

    for i, y in enumerate(ys_list):
        color = PALETTE[i % len(PALETTE)]
        segs: list[list[str]] = [[]]
        for xv, yv in zip(xs, y):
            if math.isfinite(yv):
                segs[-1].append(f"{px(xv):.2f},{py(yv):.2f}")
            elif segs[-1]:
                segs.append([])
        for seg in segs:
            if len(seg) >= 2:
                parts.append(
                    f'<polyline points="{" ".join(seg)}" fill="none" '
                    f'stroke="{color}" stroke-width="1.5"/>'
                )
        if labels is not None:
            ly = _MARGIN_T + 14 + 14 * i
            lx = _MARGIN_L + plot_w - 8
            parts.append(
                f'<line x1="{lx - 60:.1f}" y1="{ly - 4:.1f}" x2="{lx - 40:.1f}" '
                f'y2="{ly - 4:.1f}" stroke="{color}" stroke-width="1.5"/>'
            )
            parts.append(f'<text x="{lx - 36:.1f}" y="{ly:.1f}">{_esc(labels[i])}</text>')

    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def _esc(s: str) -> str:
    return s.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")


def write_line_plot(path, xs, series, **kw) -> None:
    text = line_plot(xs, series, **kw)
    with open(path, "w", newline="\n") as fh:
        fh.write(text)
