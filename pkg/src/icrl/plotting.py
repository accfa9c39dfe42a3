"""Dependency-free SVG line charts."""
from __future__ import annotations

import csv
from collections import defaultdict
from pathlib import Path
from typing import Mapping, Sequence
from xml.sax.saxutils import escape

import numpy as np

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd",
           "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf")

WIDTH, HEIGHT = 640, 400
MARGIN = {"left": 60, "right": 140, "top": 40, "bottom": 50}


class PlotError(ValueError):
    pass


def _ticks(lo: float, hi: float, n: int = 5) -> np.ndarray:
    return np.linspace(lo, hi, n)


def line_chart(series: Mapping[str, tuple[Sequence[float], Sequence[float]]], title: str = "",
               xlabel: str = "x", ylabel: str = "y") -> str:
    """Render ``{name: (xs, ys)}`` as one polyline per series."""
    if not series:
        raise PlotError("nothing to plot")
    xs = np.concatenate([np.asarray(x, dtype=float) for x, _ in series.values()])
    ys = np.concatenate([np.asarray(y, dtype=float) for _, y in series.values()])
    finite = np.isfinite(xs) & np.isfinite(ys)
    if not finite.any():
        raise PlotError("no finite points")
    x0, x1 = xs[finite].min(), xs[finite].max()
    y0, y1 = ys[finite].min(), ys[finite].max()
    if x1 == x0:
        x0, x1 = x0 - 1, x1 + 1
    if y1 == y0:
        y0, y1 = y0 - 1, y1 + 1
    pw = WIDTH - MARGIN["left"] - MARGIN["right"]
    ph = HEIGHT - MARGIN["top"] - MARGIN["bottom"]

    def px(x):
        return MARGIN["left"] + (x - x0) / (x1 - x0) * pw

    def py(y):
        return MARGIN["top"] + (1 - (y - y0) / (y1 - y0)) * ph

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
           f'viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="11">',
           f'<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
           f'<text x="{WIDTH / 2:.1f}" y="20" text-anchor="middle" font-size="13">{escape(title)}</text>']
    left, bottom = MARGIN["left"], HEIGHT - MARGIN["bottom"]
    out.append(f'<line x1="{left}" y1="{bottom}" x2="{left + pw}" y2="{bottom}" stroke="black"/>')
    out.append(f'<line x1="{left}" y1="{MARGIN["top"]}" x2="{left}" y2="{bottom}" stroke="black"/>')
    for t in _ticks(x0, x1):
        out.append(f'<text x="{px(t):.1f}" y="{bottom + 15}" text-anchor="middle">{t:.3g}</text>')
    for t in _ticks(y0, y1):
        out.append(f'<text x="{left - 5}" y="{py(t) + 4:.1f}" text-anchor="end">{t:.3g}</text>')
        out.append(f'<line x1="{left}" y1="{py(t):.1f}" x2="{left + pw}" y2="{py(t):.1f}" '
                   f'stroke="#ddd"/>')
    out.append(f'<text x="{left + pw / 2:.1f}" y="{HEIGHT - 12}" text-anchor="middle">'
               f'{escape(xlabel)}</text>')
    out.append(f'<text x="15" y="{MARGIN["top"] + ph / 2:.1f}" text-anchor="middle" '
               f'transform="rotate(-90 15 {MARGIN["top"] + ph / 2:.1f})">{escape(ylabel)}</text>')
    for i, (name, (x, y)) in enumerate(series.items()):
        color = PALETTE[i % len(PALETTE)]
        pts = " ".join(f"{px(a):.2f},{py(b):.2f}" for a, b in zip(x, y)
                       if np.isfinite(a) and np.isfinite(b))
        out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{pts}">'
                   f'<title>{escape(str(name))}</title></polyline>')
        ly = MARGIN["top"] + 14 * i
        out.append(f'<line x1="{left + pw + 10}" y1="{ly}" x2="{left + pw + 25}" y2="{ly}" '
                   f'stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{left + pw + 30}" y="{ly + 4}">{escape(str(name))}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def read_series(csv_path, x: str, y: str, series: str | None = None,
                where: Mapping[str, str] | None = None) -> dict[str, tuple[list[float], list[float]]]:
    """Group a CSV into series; rows sharing (series, x) are averaged."""
    with open(csv_path, newline="") as f:
        reader = csv.DictReader(f)
        fields = reader.fieldnames or []
        missing = [c for c in (x, y, series) if c and c not in fields]
        if missing:
            raise PlotError(f"columns {missing} not in {csv_path} (has {fields})")
        acc: dict[str, dict[float, list[float]]] = defaultdict(lambda: defaultdict(list))
        for row in reader:
            if where and any(row.get(k) != v for k, v in where.items()):
                continue
            acc[row[series] if series else y][float(row[x])].append(float(row[y]))
    if not acc:
        raise PlotError(f"no rows selected from {csv_path}")
    out = {}
    for name in sorted(acc, key=_natural):
        pts = sorted(acc[name].items())
        out[name] = ([p[0] for p in pts], [float(np.mean(p[1])) for p in pts])
    return out


def _natural(s: str):
    try:
        return (0, float(s), "")
    except ValueError:
        return (1, 0.0, s)


def plot_csv(csv_path, out_path, x: str = "shot", y: str = "normalized", series: str | None = "seed",
             where: Mapping[str, str] | None = None, title: str | None = None) -> Path:
    data = read_series(csv_path, x, y, series, where)
    svg = line_chart(data, title=title if title is not None else Path(csv_path).stem,
                     xlabel=x, ylabel=y)
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    out_path.write_text(svg)
    return out_path
