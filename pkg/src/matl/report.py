"""SVG views of a transfer matrix: value vs train count at a fixed eval count, and a heatmap.

Output is plain text built with fixed-precision number formatting, so the same
input always yields byte-identical files.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

from .checkpoint import atomic_write

WIDTH, HEIGHT = 800, 600
MARGIN_LEFT, MARGIN_RIGHT, MARGIN_TOP, MARGIN_BOTTOM = 90, 40, 60, 80


class ReportError(ValueError):
    """The requested view cannot be built from the data."""


@dataclass
class CellStats:
    mean: float
    std: float
    n_runs: int


def read_long_csv(path) -> dict[tuple[int, int], CellStats]:
    """Aggregate long-form rows into per-(train, eval) mean and population std; FAIL rows are dropped."""
    values: dict[tuple[int, int], list[float]] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = {"train_count", "eval_count", "mean"} - set(reader.fieldnames or ())
        if missing:
            raise ReportError(f"{path} lacks column(s) {sorted(missing)}")
        for row in reader:
            key = (int(row["train_count"]), int(row["eval_count"]))
            bucket = values.setdefault(key, [])
            if row["mean"] != "FAIL":
                bucket.append(float(row["mean"]))
    return {
        key: CellStats(float(np.mean(v)) if v else math.nan, float(np.std(v)) if v else math.nan, len(v))
        for key, v in values.items()
    }


def _fmt(x: float) -> str:
    return f"{x:.2f}"


def _nice_range(lo: float, hi: float) -> tuple[float, float]:
    if not math.isfinite(lo) or not math.isfinite(hi):
        return 0.0, 1.0
    if hi - lo < 1e-9:
        pad = max(abs(hi) * 0.1, 0.5)
        return lo - pad, hi + pad
    pad = (hi - lo) * 0.08
    return lo - pad, hi + pad


def _header(title: str) -> list[str]:
    return [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
        f'viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="14">',
        f'<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
        f'<text x="{WIDTH / 2:.1f}" y="32" text-anchor="middle" font-size="18">{escape(title)}</text>',
    ]


def line_plot_svg(stats: dict[tuple[int, int], CellStats], eval_count: int,
                  metric: str = "mean value") -> str:
    """Mean cell value vs train agent count at one eval count, with ±std error bars."""
    available = sorted({e for _, e in stats})
    if eval_count not in available:
        raise ReportError(f"eval count {eval_count} not in data; available: {available}")
    trains = sorted(t for t, e in stats if e == eval_count)
    points = [(t, stats[(t, eval_count)]) for t in trains]
    finite = [p for p in points if math.isfinite(p[1].mean)]
    lo = min((s.mean - s.std for _, s in finite), default=0.0)
    hi = max((s.mean + s.std for _, s in finite), default=1.0)
    y_lo, y_hi = _nice_range(lo, hi)

    plot_w = WIDTH - MARGIN_LEFT - MARGIN_RIGHT
    plot_h = HEIGHT - MARGIN_TOP - MARGIN_BOTTOM
    step = plot_w / max(len(trains), 1)

    def x_of(i: int) -> float:
        return MARGIN_LEFT + step * (i + 0.5)

    def y_of(v: float) -> float:
        return MARGIN_TOP + plot_h * (1 - (v - y_lo) / (y_hi - y_lo))

    out = _header(f"{eval_count} agents evaluation")
    x0, y0, x1 = MARGIN_LEFT, MARGIN_TOP + plot_h, MARGIN_LEFT + plot_w
    out.append(f'<line x1="{x0}" y1="{y0}" x2="{x1}" y2="{y0}" stroke="black"/>')
    out.append(f'<line x1="{x0}" y1="{MARGIN_TOP}" x2="{x0}" y2="{y0}" stroke="black"/>')
    for k in range(6):
        v = y_lo + (y_hi - y_lo) * k / 5
        y = y_of(v)
        out.append(f'<line x1="{x0 - 5}" y1="{y:.2f}" x2="{x0}" y2="{y:.2f}" stroke="black"/>')
        out.append(f'<text x="{x0 - 8}" y="{y + 5:.2f}" text-anchor="end">{_fmt(v)}</text>')
    for i, t in enumerate(trains):
        x = x_of(i)
        out.append(f'<line x1="{x:.2f}" y1="{y0}" x2="{x:.2f}" y2="{y0 + 5}" stroke="black"/>')
        out.append(f'<text class="xtick" x="{x:.2f}" y="{y0 + 22}" text-anchor="middle">{t}</text>')
    out.append(f'<text x="{x0 + plot_w / 2:.1f}" y="{HEIGHT - 20}" text-anchor="middle">train agent count</text>')
    out.append(f'<text x="22" y="{MARGIN_TOP + plot_h / 2:.1f}" text-anchor="middle" '
               f'transform="rotate(-90 22 {MARGIN_TOP + plot_h / 2:.1f})">{escape(metric)}</text>')

    coords = [(x_of(i), y_of(s.mean), s) for i, (_, s) in enumerate(points) if math.isfinite(s.mean)]
    if len(coords) > 1:
        path = " ".join(f"{x:.2f},{y:.2f}" for x, y, _ in coords)
        out.append(f'<polyline points="{path}" fill="none" stroke="#1f77b4" stroke-width="2"/>')
    for x, y, s in coords:
        top, bottom = y_of(s.mean + s.std), y_of(s.mean - s.std)
        out.append(f'<line x1="{x:.2f}" y1="{top:.2f}" x2="{x:.2f}" y2="{bottom:.2f}" stroke="#1f77b4"/>')
        for yy in (top, bottom):
            out.append(f'<line x1="{x - 6:.2f}" y1="{yy:.2f}" x2="{x + 6:.2f}" y2="{yy:.2f}" stroke="#1f77b4"/>')
        out.append(f'<circle cx="{x:.2f}" cy="{y:.2f}" r="4" fill="#1f77b4"/>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def _color(frac: float) -> str:
    # white -> dark blue
    r = round(255 - frac * (255 - 31))
    g = round(255 - frac * (255 - 71))
    b = round(255 - frac * (255 - 136))
    return f"#{r:02x}{g:02x}{b:02x}"


def heatmap_svg(stats: dict[tuple[int, int], CellStats], metric: str = "mean value") -> str:
    trains = sorted({t for t, _ in stats})
    evals = sorted({e for _, e in stats})
    means = [s.mean for s in stats.values() if math.isfinite(s.mean)]
    lo, hi = (min(means), max(means)) if means else (0.0, 1.0)
    span = hi - lo if hi > lo else 1.0

    plot_w = WIDTH - MARGIN_LEFT - MARGIN_RIGHT
    plot_h = HEIGHT - MARGIN_TOP - MARGIN_BOTTOM
    cw = plot_w / max(len(evals), 1)
    ch = plot_h / max(len(trains), 1)
    out = _header(f"transfer matrix: {metric}")
    for r, t in enumerate(trains):
        y = MARGIN_TOP + r * ch
        out.append(f'<text x="{MARGIN_LEFT - 8}" y="{y + ch / 2 + 5:.2f}" text-anchor="end">{t}</text>')
        for c, e in enumerate(evals):
            x = MARGIN_LEFT + c * cw
            s = stats.get((t, e))
            if s is None or not math.isfinite(s.mean):
                fill, label, ink = "#dddddd", "FAIL", "black"
            else:
                frac = (s.mean - lo) / span
                fill, label = _color(frac), f"{_fmt(s.mean)}±{_fmt(s.std)}"
                ink = "white" if frac > 0.6 else "black"
            out.append(f'<rect x="{x:.2f}" y="{y:.2f}" width="{cw:.2f}" height="{ch:.2f}" '
                       f'fill="{fill}" stroke="white"/>')
            out.append(f'<text x="{x + cw / 2:.2f}" y="{y + ch / 2 + 5:.2f}" text-anchor="middle" '
                       f'font-size="12" fill="{ink}">{label}</text>')
    for c, e in enumerate(evals):
        x = MARGIN_LEFT + (c + 0.5) * cw
        out.append(f'<text x="{x:.2f}" y="{MARGIN_TOP + plot_h + 22}" text-anchor="middle">{e}</text>')
    out.append(f'<text x="{MARGIN_LEFT + plot_w / 2:.1f}" y="{HEIGHT - 20}" text-anchor="middle">eval agent count</text>')
    out.append(f'<text x="22" y="{MARGIN_TOP + plot_h / 2:.1f}" text-anchor="middle" '
               f'transform="rotate(-90 22 {MARGIN_TOP + plot_h / 2:.1f})">train agent count</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def write_reports(long_csv, out_dir, eval_counts=None, metric: str = "mean value") -> list[Path]:
    """Heatmap plus one line plot per eval count (all eval counts when none are given)."""
    stats = read_long_csv(long_csv)
    counts = list(eval_counts) if eval_counts else sorted({e for _, e in stats})
    out = Path(out_dir)
    written = []
    for n in counts:
        path = out / f"eval_{n}.svg"
        atomic_write(path, line_plot_svg(stats, n, metric).encode("utf-8"))
        written.append(path)
    path = out / "heatmap.svg"
    atomic_write(path, heatmap_svg(stats, metric).encode("utf-8"))
    written.append(path)
    return written
