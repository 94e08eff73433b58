"""Minimal SVG line plots for timecourses with significance bars."""
from __future__ import annotations

from xml.sax.saxutils import escape

import numpy as np

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")


def line_plot(time_s, series: dict, clusters: dict | None = None, title: str = "",
              ylabel: str = "", width: int = 640, height: int = 360) -> str:
    """``series`` maps a label to y values; ``clusters`` maps the same labels to (start_s, end_s) spans."""
    time_s = np.asarray(time_s, dtype=float)
    left, right, top, bottom = 60, 150, 30, 50
    pw, ph = width - left - right, height - top - bottom
    ys = [np.asarray(v, dtype=float) for v in series.values()]
    finite = np.concatenate([y[np.isfinite(y)] for y in ys]) if ys else np.zeros(1)
    if finite.size == 0:
        finite = np.zeros(1)
    y0, y1 = float(finite.min()), float(finite.max())
    if y1 - y0 < 1e-12:
        y0, y1 = y0 - 1.0, y1 + 1.0
    pad = 0.08 * (y1 - y0)
    y0, y1 = y0 - pad, y1 + pad
    t0, t1 = float(time_s[0]), float(time_s[-1])

    def sx(t):
        return left + (t - t0) / (t1 - t0) * pw

    def sy(v):
        return top + (y1 - v) / (y1 - y0) * ph

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">',
           f'<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="#444"/>',
           f'<text x="{left}" y="{top - 10}" font-size="13">{escape(title)}</text>',
           f'<text x="{left + pw / 2:.1f}" y="{height - 10}" text-anchor="middle">time (s)</text>',
           f'<text x="14" y="{top + ph / 2:.1f}" transform="rotate(-90 14 {top + ph / 2:.1f})" '
           f'text-anchor="middle">{escape(ylabel)}</text>']
    if y0 < 0 < y1:
        out.append(f'<line x1="{left}" x2="{left + pw}" y1="{sy(0):.1f}" y2="{sy(0):.1f}" '
                   f'stroke="#999" stroke-dasharray="3,3"/>')
    if t0 < 0 < t1:
        out.append(f'<line x1="{sx(0):.1f}" x2="{sx(0):.1f}" y1="{top}" y2="{top + ph}" '
                   f'stroke="#999" stroke-dasharray="3,3"/>')
    for tick in np.linspace(t0, t1, 6):
        out.append(f'<text x="{sx(tick):.1f}" y="{top + ph + 14}" text-anchor="middle">{tick:.2f}</text>')
    for tick in np.linspace(y0, y1, 5):
        out.append(f'<text x="{left - 6}" y="{sy(tick) + 4:.1f}" text-anchor="end">{tick:.3g}</text>')
    for k, (label, y) in enumerate(series.items()):
        color = PALETTE[k % len(PALETTE)]
        y = np.asarray(y, dtype=float)
        pts = " ".join(f"{sx(t):.1f},{sy(v):.1f}" for t, v in zip(time_s, y) if np.isfinite(v))
        out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{pts}"/>')
        out.append(f'<text x="{left + pw + 10}" y="{top + 14 + 16 * k}" fill="{color}">{escape(label)}</text>')
        for a, b in (clusters or {}).get(label, []):
            yb = top + ph - 4 - 5 * k
            out.append(f'<line x1="{sx(a):.1f}" x2="{sx(b):.1f}" y1="{yb}" y2="{yb}" '
                       f'stroke="{color}" stroke-width="4"/>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
