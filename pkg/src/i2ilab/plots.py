"""Minimal self-contained SVG charts.

Hand-rolled on purpose: the determinism contract demands byte-identical plot
files for identical inputs, so every coordinate is formatted with a fixed
precision and nothing (ids, dates, library versions) leaks into the output.
"""

from __future__ import annotations

from typing import Sequence

PALETTE = ["#1f6fb2", "#d1495b", "#3a923a", "#8a5fbf", "#c87e26", "#4f6d7a"]


def _fmt(x: float) -> str:
    return f"{x:.2f}"


class _Canvas:
    def __init__(self, width: int, height: int):
        self.width, self.height = width, height
        self.parts: list[str] = [
            f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" '
            f'height="{height}" viewBox="0 0 {width} {height}">',
            f'<rect x="0" y="0" width="{width}" height="{height}" fill="#ffffff"/>',
        ]

    def line(self, x1, y1, x2, y2, color="#444444", width=1.0):
        self.parts.append(
            f'<line x1="{_fmt(x1)}" y1="{_fmt(y1)}" x2="{_fmt(x2)}" '
            f'y2="{_fmt(y2)}" stroke="{color}" stroke-width="{_fmt(width)}"/>')

    def polyline(self, pts: Sequence[tuple[float, float]], color: str):
        coords = " ".join(f"{_fmt(x)},{_fmt(y)}" for x, y in pts)
        self.parts.append(
            f'<polyline points="{coords}" fill="none" stroke="{color}" '
            f'stroke-width="1.80"/>')

    def circle(self, x, y, r, color):
        self.parts.append(
            f'<circle cx="{_fmt(x)}" cy="{_fmt(y)}" r="{_fmt(r)}" fill="{color}"/>')

    def rect(self, x, y, w, h, color):
        self.parts.append(
            f'<rect x="{_fmt(x)}" y="{_fmt(y)}" width="{_fmt(w)}" '
            f'height="{_fmt(h)}" fill="{color}"/>')

    def text(self, x, y, s, size=11, anchor="start", color="#222222"):
        self.parts.append(
            f'<text x="{_fmt(x)}" y="{_fmt(y)}" font-family="sans-serif" '
            f'font-size="{size}" text-anchor="{anchor}" fill="{color}">{s}</text>')

    def render(self) -> str:
        return "\n".join(self.parts + ["</svg>"]) + "\n"


def _axis_scale(vals: Sequence[float]) -> tuple[float, float]:
    lo, hi = min(vals), max(vals)
    if lo == hi:
        lo, hi = lo - 1.0, hi + 1.0
    pad = 0.06 * (hi - lo)
    return lo - pad, hi + pad


def _panel(cv: _Canvas, x0: int, y0: int, w: int, h: int, title: str,
           series: dict[str, list[tuple[float, float]]]) -> None:
    xs = [p[0] for pts in series.values() for p in pts]
    ys = [p[1] for pts in series.values() for p in pts]
    if not xs:
        raise ValueError("empty plot input")
    xlo, xhi = _axis_scale(xs)
    ylo, yhi = _axis_scale(ys)

    def sx(x):
        return x0 + (x - xlo) / (xhi - xlo) * w

    def sy(y):
        return y0 + h - (y - ylo) / (yhi - ylo) * h

    cv.line(x0, y0 + h, x0 + w, y0 + h)
    cv.line(x0, y0, x0, y0 + h)
    cv.text(x0 + w / 2, y0 - 6, title, size=12, anchor="middle")
    cv.text(x0 - 4, y0 + 10, _fmt(max(ys)), size=9, anchor="end")
    cv.text(x0 - 4, y0 + h, _fmt(min(ys)), size=9, anchor="end")
    for i, (name, pts) in enumerate(sorted(series.items())):
        color = PALETTE[i % len(PALETTE)]
        cv.polyline([(sx(x), sy(y)) for x, y in pts], color)
        for x, y in pts:
            cv.circle(sx(x), sy(y), 2.2, color)


def param_growth_svg(rows: Sequence[tuple[int, str, int, int, int]]) -> str:
    """Three panels (training-forward, inference, total size) of parameter
    counts vs task step, one curve per algorithm.

    `rows` are (task_step, algo, training_forward, inference, total).
    """
    rows = list(rows)
    if not rows:
        raise ValueError("empty parameter report")
    algos = sorted({r[1] for r in rows})
    panels = [("parameters in a training forward", 2),
              ("parameters at inference", 3),
              ("total model size", 4)]
    cv = _Canvas(960, 320)
    for pi, (title, col) in enumerate(panels):
        series = {}
        for algo in algos:
            pts = sorted((r[0], r[col]) for r in rows if r[1] == algo)
            series[algo] = [(float(x), float(y)) for x, y in pts]
        _panel(cv, 60 + pi * 310, 40, 250, 220, title, series)
    for i, algo in enumerate(algos):
        color = PALETTE[i % len(PALETTE)]
        cv.rect(60 + i * 170, 290, 10, 10, color)
        cv.text(74 + i * 170, 299, algo, size=10)
    return cv.render()


def transfer_bars_svg(table: dict) -> str:
    """Grouped bars of per-task transfer per method, from a metric table."""
    task_ids = table["task_ids"]
    rows = table["rows"]
    if not rows:
        raise ValueError("empty metric table")
    vals = [row["per_task"].get(t, 0.0) for row in rows for t in task_ids]
    ylo, yhi = _axis_scale(vals + [0.0])
    cv = _Canvas(960, 340)
    x0, y0, w, h = 70, 40, 840, 230

    def sy(y):
        return y0 + h - (y - ylo) / (yhi - ylo) * h

    cv.line(x0, sy(0.0), x0 + w, sy(0.0), color="#888888")
    cv.line(x0, y0, x0, y0 + h)
    cv.text(x0 - 4, y0 + 10, _fmt(yhi), size=9, anchor="end")
    cv.text(x0 - 4, y0 + h, _fmt(ylo), size=9, anchor="end")
    cv.text(x0 + w / 2, y0 - 10, "per-task knowledge transfer (%)", size=12,
            anchor="middle")
    group_w = w / len(task_ids)
    bar_w = group_w * 0.8 / len(rows)
    for ti, t in enumerate(task_ids):
        gx = x0 + ti * group_w
        cv.text(gx + group_w / 2, y0 + h + 16, t, size=9, anchor="middle")
        for ri, row in enumerate(rows):
            v = row["per_task"].get(t)
            if v is None:
                continue
            color = PALETTE[ri % len(PALETTE)]
            top, bot = (sy(v), sy(0.0)) if v >= 0 else (sy(0.0), sy(v))
            cv.rect(gx + group_w * 0.1 + ri * bar_w, top, bar_w * 0.92,
                    max(bot - top, 0.5), color)
    for ri, row in enumerate(rows):
        color = PALETTE[ri % len(PALETTE)]
        cv.rect(70 + ri * 170, 310, 10, 10, color)
        cv.text(84 + ri * 170, 319, row["method"], size=10)
    return cv.render()
