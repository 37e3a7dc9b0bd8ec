"""Deterministic hand-written SVG output: log-scale series panels and the 2-D demo."""

from __future__ import annotations

import logging
import math
from xml.sax.saxutils import escape

import numpy as np

from gradclust.metrics import rolling

log = logging.getLogger(__name__)

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b",
           "#e377c2", "#7f7f7f", "#bcbd22", "#17becf")

WIDTH, HEIGHT = 640, 420
MARGIN = (70, 20, 30, 50)  # left, right, top, bottom


def _num(x: float) -> str:
    return f"{x:.2f}"


def _points(xs, ys) -> str:
    return " ".join(f"{_num(x)},{_num(y)}" for x, y in zip(xs, ys))


def decade_ticks(lo: float, hi: float) -> list[int]:
    """Exponents of the powers of ten covering ``[lo, hi]``."""
    return list(range(math.floor(math.log10(lo)), math.ceil(math.log10(hi)) + 1))


def log_panel(series: dict, title: str, xlabel: str, ylabel: str, window: int = 1) -> str | None:
    """One panel, one line per series, shaded rolling-std band, log y axis.

    ``series`` maps a label to ``(x, y)`` arrays. Series without any positive
    finite value cannot be drawn on a log axis and are skipped with a warning;
    if nothing remains the panel is omitted (``None``).
    """
    drawable = {}
    for name, (x, y) in series.items():
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        ok = np.isfinite(y) & (y > 0)
        if not ok.any():
            log.warning("%s: series %r has no positive values, omitted", title, name)
            continue
        drawable[name] = (x[ok], y[ok])
    if not drawable:
        log.warning("%s: no drawable series, panel omitted", title)
        return None

    smoothed = {}
    for name, (x, y) in drawable.items():
        s = rolling(np.log10(y), window)
        smoothed[name] = (x, s.mean, s.std)
    ymin = min(float((m - s).min()) for _, m, s in smoothed.values())
    ymax = max(float((m + s).max()) for _, m, s in smoothed.values())
    ticks = decade_ticks(10 ** ymin, 10 ** ymax)
    lo, hi = ticks[0], max(ticks[-1], ticks[0] + 1)
    xmin = min(float(x.min()) for x, _, _ in smoothed.values())
    xmax = max(float(x.max()) for x, _, _ in smoothed.values())
    if xmax == xmin:
        xmax = xmin + 1.0

    left, right, top, bottom = MARGIN
    pw, ph = WIDTH - left - right, HEIGHT - top - bottom

    def sx(x):
        return left + (np.asarray(x) - xmin) / (xmax - xmin) * pw

    def sy(ly):
        return top + (hi - np.asarray(ly)) / (hi - lo) * ph

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
           f'viewBox="0 0 {WIDTH} {HEIGHT}">',
           f'<title>{escape(title)}</title>',
           f'<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="black"/>']
    for e in range(lo, hi + 1):
        y = _num(float(sy(e)))
        out.append(f'<line class="ytick" x1="{left - 5}" y1="{y}" x2="{left}" y2="{y}" stroke="black"/>')
        out.append(f'<text x="{left - 8}" y="{y}" text-anchor="end" font-size="11">1e{e}</text>')
    out.append(f'<text x="{left + pw / 2}" y="{HEIGHT - 10}" text-anchor="middle" font-size="12">'
               f'{escape(xlabel)}</text>')
    out.append(f'<text x="15" y="{top + ph / 2}" font-size="12" transform="rotate(-90 15 {top + ph / 2})" '
               f'text-anchor="middle">{escape(ylabel)}</text>')
    for i, (name, (x, m, s)) in enumerate(smoothed.items()):
        color = PALETTE[i % len(PALETTE)]
        px = sx(x)
        band = _points(np.concatenate([px, px[::-1]]), np.concatenate([sy(m + s), sy((m - s)[::-1])]))
        out.append(f'<polygon class="band" points="{band}" fill="{color}" fill-opacity="0.2" stroke="none"/>')
        out.append(f'<polyline class="series" data-name="{escape(name)}" points="{_points(px, sy(m))}" '
                   f'fill="none" stroke="{color}" stroke-width="1.5"/>')
        out.append(f'<text x="{left + pw - 5}" y="{top + 15 + 14 * i}" text-anchor="end" font-size="11" '
                   f'fill="{color}">{escape(name)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def boundary_segment(w, box):
    """Clip the line ``w . x = 0`` to the box ``(x0, x1, y0, y1)``; ``None`` if it misses."""
    x0, x1, y0, y1 = box
    a, b = float(w[0]), float(w[1])
    pts = []
    if b != 0:
        for x in (x0, x1):
            y = -a * x / b
            if y0 <= y <= y1:
                pts.append((x, y))
    if a != 0:
        for y in (y0, y1):
            x = -b * y / a
            if x0 <= x <= x1:
                pts.append((x, y))
    uniq = []
    for p in pts:
        if all(abs(p[0] - q[0]) > 1e-12 or abs(p[1] - q[1]) > 1e-12 for q in uniq):
            uniq.append(p)
    if len(uniq) < 2:
        return None
    return uniq[0], uniq[1]


def cluster_scatter(points, labels, assignments, boundary, predicted, lr, step) -> str:
    """2-D scatter coloured by cluster with the current and predicted boundaries.

    ``predicted`` is a list of weight vectors, one per cluster. Every boundary
    is one ``polyline``; boundaries that miss the view are drawn as a
    degenerate polyline at the origin so the count stays one per boundary.
    """
    p = np.asarray(points, dtype=np.float64)
    pad = 0.5
    x0, x1 = float(p[:, 0].min()) - pad, float(p[:, 0].max()) + pad
    y0, y1 = float(p[:, 1].min()) - pad, float(p[:, 1].max()) + pad
    size = 480
    scale = size / max(x1 - x0, y1 - y0)

    def tx(x, y):
        return (x - x0) * scale + 10, (y1 - y) * scale + 10

    w_px = int((x1 - x0) * scale) + 20
    h_px = int((y1 - y0) * scale) + 20
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{w_px}" height="{h_px}" '
           f'viewBox="0 0 {w_px} {h_px}">',
           f'<title>gradient clusters, GD step {step}</title>',
           f'<metadata>{{"step": {step}, "lr": {lr!r}, "clusters": {len(predicted)}}}</metadata>']
    for (x, y), lab, k in zip(p, labels, assignments):
        cx, cy = tx(x, y)
        color = PALETTE[int(k) % len(PALETTE)]
        if lab > 0:
            out.append(f'<circle cx="{_num(cx)}" cy="{_num(cy)}" r="4" fill="none" stroke="{color}" '
                       f'stroke-width="1.5"/>')
        else:
            out.append(f'<path d="M{_num(cx - 4)},{_num(cy - 4)} L{_num(cx + 4)},{_num(cy + 4)} '
                       f'M{_num(cx - 4)},{_num(cy + 4)} L{_num(cx + 4)},{_num(cy - 4)}" stroke="{color}" '
                       f'stroke-width="1.5"/>')

    def line(w, color, cls, dash):
        seg = boundary_segment(w, (x0, x1, y0, y1))
        if seg is None:
            seg = ((0.0, 0.0), (0.0, 0.0))
        (ax, ay), (bx, by) = tx(*seg[0]), tx(*seg[1])
        extra = ' stroke-dasharray="6,4"' if dash else ""
        out.append(f'<polyline class="{cls}" points="{_num(ax)},{_num(ay)} {_num(bx)},{_num(by)}" '
                   f'fill="none" stroke="{color}" stroke-width="1.5"{extra}/>')

    line(boundary, "black", "boundary", False)
    for k, w in enumerate(predicted):
        line(w, PALETTE[k % len(PALETTE)], "predicted", True)
    out.append("</svg>")
    return "\n".join(out) + "\n"
