"""Self-contained SVG heatmaps and line plots. Output bytes depend only on the inputs."""

from __future__ import annotations

import math
from xml.sax.saxutils import escape

import numpy as np

CELL = 44
MARGIN = 110
PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f")


def _num(v: float) -> str:
    return f"{v:.2f}"


def _header(width: float, height: float, title: str) -> list[str]:
    return [f'<svg xmlns="http://www.w3.org/2000/svg" width="{_num(width)}" height="{_num(height)}" '
            f'viewBox="0 0 {_num(width)} {_num(height)}" font-family="sans-serif" font-size="11">',
            f'<rect width="100%" height="100%" fill="white"/>',
            f'<text x="{_num(width / 2)}" y="18" text-anchor="middle" font-size="14">{escape(title)}</text>']


def _shade(value: float, lo: float, hi: float) -> str:
    """White to dark blue."""
    t = 0.0 if hi <= lo or not math.isfinite(value) else min(max((value - lo) / (hi - lo), 0.0), 1.0)
    r, g, b = (round(255 + t * (c - 255)) for c in (8, 48, 107))
    return f"#{r:02x}{g:02x}{b:02x}"


def heatmap_svg(matrix, row_labels, col_labels, title: str = "", fmt: str = "{:.2f}") -> str:
    """One rect per cell with its value printed inside, rows top to bottom."""
    m = np.asarray(matrix, dtype=np.float64)
    if m.size == 0:
        m = m.reshape(len(row_labels), len(col_labels))
    if m.shape != (len(row_labels), len(col_labels)):
        raise ValueError(f"matrix shape {m.shape} does not match {len(row_labels)} x {len(col_labels)} labels")
    finite = m[np.isfinite(m)]
    lo, hi = (float(finite.min()), float(finite.max())) if finite.size else (0.0, 1.0)
    width = MARGIN + CELL * m.shape[1] + 20
    height = MARGIN + CELL * m.shape[0] + 20
    out = _header(width, height, title)
    for j, name in enumerate(col_labels):
        x = MARGIN + CELL * j + CELL / 2
        out.append(f'<text x="{_num(x)}" y="{_num(MARGIN - 8)}" text-anchor="start" '
                   f'transform="rotate(-45 {_num(x)} {_num(MARGIN - 8)})">{escape(str(name))}</text>')
    for i, name in enumerate(row_labels):
        y = MARGIN + CELL * i
        out.append(f'<text x="{_num(MARGIN - 6)}" y="{_num(y + CELL / 2 + 4)}" text-anchor="end">'
                   f'{escape(str(name))}</text>')
        for j in range(m.shape[1]):
            x = MARGIN + CELL * j
            v = m[i, j]
            fill = _shade(v, lo, hi)
            ink = "white" if math.isfinite(v) and hi > lo and (v - lo) / (hi - lo) > 0.55 else "black"
            out.append(f'<rect class="cell" x="{_num(x)}" y="{_num(y)}" width="{CELL}" height="{CELL}" '
                       f'fill="{fill}" stroke="#cccccc"/>')
            out.append(f'<text x="{_num(x + CELL / 2)}" y="{_num(y + CELL / 2 + 4)}" text-anchor="middle" '
                       f'fill="{ink}">{escape(fmt.format(v))}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def line_plot_svg(series: dict, title: str = "", x_label: str = "", y_label: str = "", log_y: bool = False,
                  width: int = 480, height: int = 320) -> str:
    """``series`` maps a name to ``(xs, ys)``; one polyline per series, in insertion order."""
    left, right, top, bottom = 60, 130, 30, 40
    prepared = {}
    for name, (xs, ys) in series.items():
        xs, ys = np.asarray(xs, np.float64), np.asarray(ys, np.float64)
        if log_y:
            ys = np.log10(np.maximum(ys, 1e-12))
        prepared[name] = (xs, ys)
    all_x = np.concatenate([x for x, _ in prepared.values()]) if prepared else np.zeros(1)
    all_y = np.concatenate([y for _, y in prepared.values()]) if prepared else np.zeros(1)
    x0, x1 = float(all_x.min()), float(all_x.max())
    y0, y1 = float(all_y.min()), float(all_y.max())
    x1, y1 = (x0 + 1 if x1 == x0 else x1), (y0 + 1 if y1 == y0 else y1)
    pw, ph = width - left - right, height - top - bottom

    def px(x):
        return left + (x - x0) / (x1 - x0) * pw

    def py(y):
        return top + ph - (y - y0) / (y1 - y0) * ph

    out = _header(width, height, title)
    out.append(f'<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="black"/>')
    for v in (x0, x1):
        out.append(f'<text x="{_num(px(v))}" y="{height - bottom + 14}" text-anchor="middle">{v:g}</text>')
    for v in (y0, y1):
        label = f"1e{v:.1f}" if log_y else f"{v:.3g}"
        out.append(f'<text x="{left - 4}" y="{_num(py(v) + 4)}" text-anchor="end">{label}</text>')
    out.append(f'<text x="{_num(left + pw / 2)}" y="{height - 6}" text-anchor="middle">{escape(x_label)}</text>')
    out.append(f'<text x="14" y="{_num(top + ph / 2)}" text-anchor="middle" '
               f'transform="rotate(-90 14 {_num(top + ph / 2)})">{escape(y_label)}</text>')
    for k, (name, (xs, ys)) in enumerate(prepared.items()):
        colour = PALETTE[k % len(PALETTE)]
        points = " ".join(f"{_num(px(x))},{_num(py(y))}" for x, y in zip(xs, ys))
        out.append(f'<polyline fill="none" stroke="{colour}" stroke-width="1.5" points="{points}"/>')
        ly = top + 12 + 16 * k
        out.append(f'<line x1="{width - right + 8}" y1="{ly}" x2="{width - right + 28}" y2="{ly}" '
                   f'stroke="{colour}" stroke-width="2"/>')
        out.append(f'<text x="{width - right + 32}" y="{ly + 4}">{escape(str(name))}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
