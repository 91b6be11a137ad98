"""Minimal SVG line charts (no plotting dependency)."""
from __future__ import annotations

import math
from xml.sax.saxutils import escape

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f")


def _ticks(lo, hi, n=5):
    if hi <= lo:
        hi = lo + 1.0
    return [lo + (hi - lo) * k / (n - 1) for k in range(n)]


def line_chart(series, title="", xlabel="", ylabel="", logy=False, width=520, height=360) -> str:
    """series: list of (label, xs, ys).  Non-finite and (for logy) non-positive points are skipped."""
    pts = []
    for label, xs, ys in series:
        keep = []
        for x, y in zip(xs, ys):
            if not (math.isfinite(x) and math.isfinite(y)):
                continue
            if logy and y <= 0:
                continue
            keep.append((float(x), math.log10(y) if logy else float(y)))
        pts.append((label, keep))
    allx = [p[0] for _, k in pts for p in k] or [0.0, 1.0]
    ally = [p[1] for _, k in pts for p in k] or [0.0, 1.0]
    x0, x1 = min(allx), max(allx)
    y0, y1 = min(ally), max(ally)
    if x1 == x0:
        x1 = x0 + 1.0
    if y1 == y0:
        y0, y1 = y0 - 0.5, y1 + 0.5
    L, R, T, B = 70, 130, 30, 45
    pw, ph = width - L - R, height - T - B

    def sx(x):
        return L + (x - x0) / (x1 - x0) * pw

    def sy(y):
        return T + ph - (y - y0) / (y1 - y0) * ph

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'font-family="sans-serif" font-size="11">',
           f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
           f'<rect x="{L}" y="{T}" width="{pw}" height="{ph}" fill="none" stroke="#444"/>',
           f'<text x="{width / 2:.1f}" y="18" text-anchor="middle" font-size="13">{escape(title)}</text>',
           f'<text x="{L + pw / 2:.1f}" y="{height - 8}" text-anchor="middle">{escape(xlabel)}</text>',
           f'<text x="14" y="{T + ph / 2:.1f}" text-anchor="middle" '
           f'transform="rotate(-90 14 {T + ph / 2:.1f})">{escape(ylabel)}</text>']
    for x in _ticks(x0, x1):
        out.append(f'<text x="{sx(x):.1f}" y="{T + ph + 15}" text-anchor="middle">{x:.3g}</text>')
    for y in _ticks(y0, y1):
        lab = f"1e{y:.2g}" if logy else f"{y:.3g}"
        out.append(f'<text x="{L - 5}" y="{sy(y) + 4:.1f}" text-anchor="end">{lab}</text>')
        out.append(f'<line x1="{L}" x2="{L + pw}" y1="{sy(y):.1f}" y2="{sy(y):.1f}" stroke="#ddd"/>')
    for k, (label, keep) in enumerate(pts):
        col = PALETTE[k % len(PALETTE)]
        if keep:
            path = " ".join(f"{sx(x):.2f},{sy(y):.2f}" for x, y in keep)
            out.append(f'<polyline fill="none" stroke="{col}" stroke-width="1.5" points="{path}"/>')
        ly = T + 14 + 16 * k
        out.append(f'<line x1="{L + pw + 10}" x2="{L + pw + 30}" y1="{ly - 4}" y2="{ly - 4}" '
                   f'stroke="{col}" stroke-width="2"/>')
        out.append(f'<text x="{L + pw + 35}" y="{ly}">{escape(str(label))}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def write_chart(path, *args, **kwargs):
    with open(path, "w") as fh:
        fh.write(line_chart(*args, **kwargs))
