"""Minimal SVG line charts."""
from __future__ import annotations

import math
from xml.sax.saxutils import escape

PALETTE = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"]


def line_chart(series: dict, path, title: str = "", xlabel: str = "", ylabel: str = "",
               logy: bool = False, width: int = 560, height: int = 360) -> None:
    """``series`` maps a legend label to ``(xs, ys)``. Non-finite points are skipped."""
    pts = {k: [(float(x), float(y)) for x, y in zip(*v) if math.isfinite(float(y)) and (not logy or y > 0)]
           for k, v in series.items()}
    allp = [p for v in pts.values() for p in v]
    ml, mr, mt, mb = 60, 130, 30, 45
    pw, ph = width - ml - mr, height - mt - mb
    tf = (lambda y: math.log10(y)) if logy else (lambda y: y)
    if allp:
        x0, x1 = min(p[0] for p in allp), max(p[0] for p in allp)
        y0, y1 = min(tf(p[1]) for p in allp), max(tf(p[1]) for p in allp)
    else:
        x0, x1, y0, y1 = 0.0, 1.0, 0.0, 1.0
    if x1 == x0:
        x1 = x0 + 1.0
    if y1 == y0:
        y1 = y0 + 1.0

    def sx(x):
        return ml + (x - x0) / (x1 - x0) * pw

    def sy(y):
        return mt + ph - (tf(y) - y0) / (y1 - y0) * ph

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'font-family="sans-serif" font-size="11">',
           f'<rect width="{width}" height="{height}" fill="white"/>',
           f'<rect x="{ml}" y="{mt}" width="{pw}" height="{ph}" fill="none" stroke="#444"/>',
           f'<text x="{width / 2:.1f}" y="18" text-anchor="middle" font-size="13">{escape(title)}</text>',
           f'<text x="{ml + pw / 2:.1f}" y="{height - 8}" text-anchor="middle">{escape(xlabel)}</text>',
           f'<text x="14" y="{mt + ph / 2:.1f}" text-anchor="middle" '
           f'transform="rotate(-90 14 {mt + ph / 2:.1f})">{escape(ylabel)}</text>']
    for i in range(5):
        fx = x0 + (x1 - x0) * i / 4
        fy = y0 + (y1 - y0) * i / 4
        ylab = 10 ** fy if logy else fy
        out.append(f'<text x="{sx(fx):.1f}" y="{mt + ph + 14}" text-anchor="middle">{fx:.4g}</text>')
        ypix = mt + ph - (fy - y0) / (y1 - y0) * ph
        out.append(f'<text x="{ml - 4}" y="{ypix + 4:.1f}" text-anchor="end">{ylab:.3g}</text>')
    for i, (label, p) in enumerate(pts.items()):
        color = PALETTE[i % len(PALETTE)]
        if p:
            d = " ".join(f"{sx(x):.2f},{sy(y):.2f}" for x, y in p)
            out.append(f'<polyline points="{d}" fill="none" stroke="{color}" stroke-width="1.5"/>')
        ly = mt + 14 * (i + 1)
        out.append(f'<line x1="{ml + pw + 8}" y1="{ly - 4}" x2="{ml + pw + 24}" y2="{ly - 4}" stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{ml + pw + 28}" y="{ly}">{escape(str(label))}</text>')
    out.append("</svg>")
    with open(path, "w") as fh:
        fh.write("\n".join(out) + "\n")
