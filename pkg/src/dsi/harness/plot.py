"""Minimal deterministic SVG line charts with optional ±std bands."""
from __future__ import annotations

import math
from xml.sax.saxutils import escape

from ..exceptions import ConfigError

WIDTH, HEIGHT = 640, 400
MARGIN = dict(left=70, right=20, top=40, bottom=60)
COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf", "#8c564b")


def _fmt(v):
    return f"{v:.2f}"


def _ticks(lo, hi, n=5):
    if hi == lo:
        return [lo]
    step = (hi - lo) / (n - 1)
    return [lo + i * step for i in range(n)]


def emit_plot(series, meta, path):
    """Write an SVG chart of ``series`` to ``path`` and return the SVG text.

    ``series`` is a list of dicts with ``label``, ``x`` and ``y`` lists and an
    optional ``err`` list (drawn as a shaded band).  ``meta`` may carry
    ``title``, ``xlabel``, ``ylabel`` and ``xticklabels`` (one label per
    integer x position, for categorical axes).  Output depends only on the
    inputs, so equal data gives identical bytes.
    """
    series = list(series or [])
    if not series:
        raise ConfigError("emit_plot needs at least one series")
    for s in series:
        if len(s["x"]) != len(s["y"]) or not len(s["x"]):
            raise ConfigError(f"series {s.get('label', '?')!r} needs equal, non-empty x and y")
        if s.get("err") is not None and len(s["err"]) != len(s["y"]):
            raise ConfigError(f"series {s.get('label', '?')!r}: err length differs from y")

    xs = [float(v) for s in series for v in s["x"]]
    ys = []
    for s in series:
        err = s.get("err") or [0.0] * len(s["y"])
        for y, e in zip(s["y"], err):
            if math.isfinite(y):
                ys.extend((y - e, y + e))
    x_lo, x_hi = min(xs), max(xs)
    y_lo, y_hi = (min(ys), max(ys)) if ys else (0.0, 1.0)
    if x_hi == x_lo:
        x_lo, x_hi = x_lo - 1, x_hi + 1
    if y_hi == y_lo:
        y_lo, y_hi = y_lo - 0.5, y_hi + 0.5
    pad = 0.05 * (y_hi - y_lo)
    y_lo, y_hi = y_lo - pad, y_hi + pad

    pw = WIDTH - MARGIN["left"] - MARGIN["right"]
    ph = HEIGHT - MARGIN["top"] - MARGIN["bottom"]

    def px(x):
        return MARGIN["left"] + (x - x_lo) / (x_hi - x_lo) * pw

    def py(y):
        return MARGIN["top"] + (1 - (y - y_lo) / (y_hi - y_lo)) * ph

    out = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
        f'viewBox="0 0 {WIDTH} {HEIGHT}">',
        f'<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
    ]
    x0, y0 = MARGIN["left"], MARGIN["top"] + ph
    out.append(f'<line x1="{x0}" y1="{y0}" x2="{x0 + pw}" y2="{y0}" stroke="black"/>')
    out.append(f'<line x1="{x0}" y1="{MARGIN["top"]}" x2="{x0}" y2="{y0}" stroke="black"/>')

    labels = meta.get("xticklabels")
    xticks = range(len(labels)) if labels else _ticks(x_lo, x_hi)
    for i, t in enumerate(xticks):
        text = labels[i] if labels else f"{t:g}"
        out.append(f'<text x="{_fmt(px(t))}" y="{y0 + 18}" font-size="11" '
                   f'text-anchor="middle">{escape(str(text))}</text>')
    for t in _ticks(y_lo, y_hi):
        out.append(f'<text x="{x0 - 6}" y="{_fmt(py(t) + 4)}" font-size="11" '
                   f'text-anchor="end">{t:.3g}</text>')

    for k, s in enumerate(series):
        color = COLORS[k % len(COLORS)]
        pts = sorted(zip(map(float, s["x"]), map(float, s["y"]),
                         s.get("err") or [0.0] * len(s["y"])))
        if s.get("err") is not None and len(pts) > 1:
            upper = [f"{_fmt(px(x))},{_fmt(py(y + e))}" for x, y, e in pts]
            lower = [f"{_fmt(px(x))},{_fmt(py(y - e))}" for x, y, e in reversed(pts)]
            out.append(f'<polygon points="{" ".join(upper + lower)}" fill="{color}" '
                       f'fill-opacity="0.2" stroke="none"/>')
        if len(pts) > 1:
            line = " ".join(f"{_fmt(px(x))},{_fmt(py(y))}" for x, y, _ in pts)
            out.append(f'<polyline points="{line}" fill="none" stroke="{color}" stroke-width="2"/>')
        for x, y, _ in pts:
            out.append(f'<circle cx="{_fmt(px(x))}" cy="{_fmt(py(y))}" r="3" fill="{color}"/>')
        ly = MARGIN["top"] + 14 * k
        out.append(f'<text x="{x0 + pw - 4}" y="{ly}" font-size="11" text-anchor="end" '
                   f'fill="{color}">{escape(str(s.get("label", f"series {k}")))}</text>')

    if meta.get("title"):
        out.append(f'<text x="{WIDTH / 2:g}" y="22" font-size="14" text-anchor="middle">'
                   f'{escape(meta["title"])}</text>')
    if meta.get("xlabel"):
        out.append(f'<text x="{x0 + pw / 2:g}" y="{HEIGHT - 16}" font-size="12" '
                   f'text-anchor="middle">{escape(meta["xlabel"])}</text>')
    if meta.get("ylabel"):
        cy = MARGIN["top"] + ph / 2
        out.append(f'<text x="18" y="{cy:g}" font-size="12" text-anchor="middle" '
                   f'transform="rotate(-90 18 {cy:g})">{escape(meta["ylabel"])}</text>')
    out.append("</svg>")
    svg = "\n".join(out) + "\n"
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(svg)
    return svg
