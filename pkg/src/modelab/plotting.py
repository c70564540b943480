"""Self-contained SVG scatter plots on a fixed 800 x 800 canvas."""
from xml.sax.saxutils import escape

import numpy as np

SIZE = 800
MARGIN = 60
PALETTE = ("#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd",
           "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf")


def _bounds(points):
    lo, hi = points.min(axis=0), points.max(axis=0)
    center = (lo + hi) / 2.0
    half = max(float(np.max(hi - lo)) / 2.0, 1e-9) * 1.05
    return center - half, center + half


def scatter_svg(layers, title=""):
    """Render ``layers`` as one SVG document.

    Each layer is ``(points N x 2, color_index N, marker)`` with marker
    ``"dot"`` or ``"ring"``; all layers share one square data window.
    """
    layers = [(np.asarray(p, dtype=np.float64)[:, :2], np.asarray(c, dtype=np.int64), m)
              for p, c, m in layers if len(p)]
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" viewBox="0 0 {SIZE} {SIZE}" '
           f'width="{SIZE}" height="{SIZE}">',
           f'<rect x="0" y="0" width="{SIZE}" height="{SIZE}" fill="white"/>']
    if title:
        out.append(f'<text x="{SIZE // 2}" y="32" text-anchor="middle" font-family="sans-serif" '
                   f'font-size="20">{escape(title)}</text>')
    span = SIZE - 2 * MARGIN
    out.append(f'<rect x="{MARGIN}" y="{MARGIN}" width="{span}" height="{span}" '
               'fill="none" stroke="#444"/>')
    if layers:
        lo, hi = _bounds(np.concatenate([p for p, _, _ in layers]))
        scale = span / (hi - lo)
        for points, colors, marker in layers:
            xs = MARGIN + (points[:, 0] - lo[0]) * scale[0]
            ys = SIZE - MARGIN - (points[:, 1] - lo[1]) * scale[1]
            for x, y, c in zip(xs, ys, colors):
                color = PALETTE[int(c) % len(PALETTE)]
                if marker == "ring":
                    out.append(f'<circle cx="{x:.2f}" cy="{y:.2f}" r="4" fill="none" '
                               f'stroke="{color}"/>')
                else:
                    out.append(f'<circle cx="{x:.2f}" cy="{y:.2f}" r="2.5" fill="{color}"/>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def write_svg(path, layers, title=""):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(scatter_svg(layers, title))
