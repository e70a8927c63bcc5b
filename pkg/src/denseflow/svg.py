"""Minimal SVG line and bar charts, enough for loss curves and sweep tables."""

from __future__ import annotations

import math
from html import escape
from typing import Mapping, Sequence

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b")
W, H = 480, 320
LEFT, RIGHT, TOP, BOTTOM = 60, 20, 30, 45


def _fmt(v: float) -> str:
    return f"{v:.4g}"


def _frame(title: str, xlabel: str, ylabel: str) -> list[str]:
    return [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">',
        '<rect width="100%" height="100%" fill="white"/>',
        f'<text x="{W / 2}" y="18" text-anchor="middle" font-size="14">{escape(title)}</text>',
        f'<text x="{W / 2}" y="{H - 8}" text-anchor="middle" font-size="12">{escape(xlabel)}</text>',
        f'<text x="14" y="{H / 2}" text-anchor="middle" font-size="12" '
        f'transform="rotate(-90 14 {H / 2})">{escape(ylabel)}</text>',
        f'<line x1="{LEFT}" y1="{H - BOTTOM}" x2="{W - RIGHT}" y2="{H - BOTTOM}" stroke="black"/>',
        f'<line x1="{LEFT}" y1="{TOP}" x2="{LEFT}" y2="{H - BOTTOM}" stroke="black"/>',
    ]


def _span(values: Sequence[float]) -> tuple[float, float]:
    finite = [v for v in values if math.isfinite(v)]
    if not finite:
        return 0.0, 1.0
    lo, hi = min(finite), max(finite)
    if lo == hi:
        pad = abs(lo) * 0.05 or 1.0
        return lo - pad, hi + pad
    return lo, hi


def line_chart(series: Mapping[str, tuple[Sequence[float], Sequence[float]]], title: str = "",
               xlabel: str = "", ylabel: str = "", log_x: bool = False) -> str:
    """``series`` maps a label to (xs, ys)."""
    if not series:
        raise ValueError("no series to plot")
    tx = (lambda v: math.log10(v)) if log_x else (lambda v: v)
    xs_all = [tx(x) for xs, _ in series.values() for x in xs]
    ys_all = [y for _, ys in series.values() for y in ys]
    x0, x1 = _span(xs_all)
    y0, y1 = _span(ys_all)
    pw, ph = W - LEFT - RIGHT, H - TOP - BOTTOM

    def px(x):
        return LEFT + (tx(x) - x0) / (x1 - x0) * pw

    def py(y):
        return H - BOTTOM - (y - y0) / (y1 - y0) * ph

    out = _frame(title, xlabel, ylabel)
    for v in (y0, y1):
        out.append(f'<text x="{LEFT - 4}" y="{py(v) + 4:.1f}" text-anchor="end" font-size="10">{_fmt(v)}</text>')
    for v in (x0, x1):
        label = _fmt(10 ** v) if log_x else _fmt(v)
        xpos = LEFT + (v - x0) / (x1 - x0) * pw
        out.append(f'<text x="{xpos:.1f}" y="{H - BOTTOM + 14}" text-anchor="middle" font-size="10">{label}</text>')
    for i, (label, (xs, ys)) in enumerate(series.items()):
        color = PALETTE[i % len(PALETTE)]
        pts = " ".join(f"{px(x):.1f},{py(y):.1f}" for x, y in zip(xs, ys) if math.isfinite(y))
        out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{pts}"/>')
        out.append(f'<text x="{W - RIGHT - 4}" y="{TOP + 14 * (i + 1)}" text-anchor="end" '
                   f'font-size="11" fill="{color}">{escape(label)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def bar_chart(values: Mapping[str, float], title: str = "", ylabel: str = "") -> str:
    if not values:
        raise ValueError("no bars to plot")
    top = max(max(values.values()), 0.0) or 1.0
    pw, ph = W - LEFT - RIGHT, H - TOP - BOTTOM
    slot = pw / len(values)
    out = _frame(title, "", ylabel)
    for i, (label, v) in enumerate(values.items()):
        h = max(v, 0.0) / top * ph
        x = LEFT + i * slot + slot * 0.15
        out.append(f'<rect x="{x:.1f}" y="{H - BOTTOM - h:.1f}" width="{slot * 0.7:.1f}" height="{h:.1f}" '
                   f'fill="{PALETTE[i % len(PALETTE)]}"/>')
        out.append(f'<text x="{x + slot * 0.35:.1f}" y="{H - BOTTOM + 14}" text-anchor="middle" '
                   f'font-size="10">{escape(label)}</text>')
        out.append(f'<text x="{x + slot * 0.35:.1f}" y="{H - BOTTOM - h - 4:.1f}" text-anchor="middle" '
                   f'font-size="10">{_fmt(v)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
