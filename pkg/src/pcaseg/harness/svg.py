"""Dependency-free SVG charts with byte-stable output."""

from __future__ import annotations

import math
from pathlib import Path
from typing import TYPE_CHECKING, List, Sequence, Tuple

from ..trainer import TrainingLog

if TYPE_CHECKING:
    from .experiment import ResultTable

WIDTH, HEIGHT = 640, 360
LEFT, RIGHT, TOP, BOTTOM = 60, 60, 30, 50
LOSS_SERIES = ("l_seg", "l_adv", "l_fm", "l_ipm", "l_disc")
COLORS = ("#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b")


def _n(v: float) -> str:
    return f"{v:.2f}"


def _header(title: str) -> List[str]:
    return [f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
            f'viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="11">',
            f'<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
            f'<text x="{WIDTH / 2:.0f}" y="18" text-anchor="middle" font-size="13">{title}</text>']


def _ticks(lo: float, hi: float, n: int = 5) -> List[float]:
    return [lo + (hi - lo) * i / n for i in range(n + 1)]


def learning_curve_svg(log: TrainingLog) -> str:
    if len(log) == 0:
        raise ValueError("cannot plot an empty training log")
    iters = [float(r["iter"]) for r in log.rows]
    x0, x1 = min(iters), max(iters)
    if x1 == x0:
        x1 = x0 + 1
    px0, px1, py0, py1 = LEFT, WIDTH - RIGHT, HEIGHT - BOTTOM, TOP

    def sx(v):
        return px0 + (v - x0) / (x1 - x0) * (px1 - px0)

    series: List[Tuple[str, List[Tuple[float, float]], str]] = []
    for name in LOSS_SERIES:
        pts = [(float(r["iter"]), r[name]) for r in log.rows if r.get(name) is not None]
        if pts:
            series.append((name, pts, "left"))
    evals = [(float(i), v) for i, v in log.evaluations()]
    if evals:
        series.append(("val_dsc", evals, "right"))

    loss_vals = [v for _, pts, ax in series if ax == "left" for _, v in pts if math.isfinite(v)]
    l_hi = max(loss_vals) if loss_vals else 1.0
    l_hi = l_hi if l_hi > 0 else 1.0

    def sy(v, axis):
        frac = v / l_hi if axis == "left" else v
        frac = min(max(frac, 0.0), 1.0)
        return py0 + frac * (py1 - py0)

    out = _header("Learning curve")
    out.append(f'<line x1="{px0}" y1="{py0}" x2="{px1}" y2="{py0}" stroke="black"/>')
    out.append(f'<line x1="{px0}" y1="{py0}" x2="{px0}" y2="{py1}" stroke="black"/>')
    out.append(f'<line x1="{px1}" y1="{py0}" x2="{px1}" y2="{py1}" stroke="black"/>')
    for t in _ticks(x0, x1):
        out.append(f'<text x="{_n(sx(t))}" y="{py0 + 15}" text-anchor="middle">{t:.0f}</text>')
    for t in _ticks(0.0, 1.0):
        y = _n(py0 + t * (py1 - py0))
        out.append(f'<text x="{px0 - 5}" y="{y}" text-anchor="end">{t * l_hi:.3g}</text>')
        out.append(f'<text x="{px1 + 5}" y="{y}">{t:.1f}</text>')
    out.append(f'<text x="{WIDTH / 2:.0f}" y="{HEIGHT - 12}" text-anchor="middle">iteration</text>')
    out.append(f'<text x="14" y="{HEIGHT / 2:.0f}" transform="rotate(-90 14 {HEIGHT / 2:.0f})" '
               f'text-anchor="middle">loss</text>')
    out.append(f'<text x="{WIDTH - 14}" y="{HEIGHT / 2:.0f}" transform="rotate(90 {WIDTH - 14} {HEIGHT / 2:.0f})" '
               f'text-anchor="middle">validation DSC</text>')
    for k, (name, pts, axis) in enumerate(series):
        color = COLORS[k % len(COLORS)]
        coords = " ".join(f"{_n(sx(i))},{_n(sy(v, axis))}" for i, v in pts if math.isfinite(v))
        dash = ' stroke-dasharray="4 2"' if axis == "right" else ""
        out.append(f'<polyline class="series" data-name="{name}" fill="none" stroke="{color}"{dash} '
                   f'points="{coords}"/>')
        out.append(f'<text x="{px0 + 8 + 90 * k}" y="{TOP + 12}" fill="{color}">{name}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def emit_learning_curve(log: TrainingLog, path) -> Path:
    """Write a two-axis learning curve: loss terms on the left, validation DSC on the right."""
    text = learning_curve_svg(log)
    p = Path(path)
    p.write_text(text)
    return p


def ablation_chart_svg(table: "ResultTable", metrics: Sequence[str] = ("dsc", "ja")) -> str:
    """Grouped bars of mean overlap metrics per run with one-std whiskers."""
    rows = table.rows
    px0, px1, py0, py1 = LEFT, WIDTH - RIGHT, HEIGHT - BOTTOM, TOP
    group_w = (px1 - px0) / max(len(rows), 1)
    bar_w = group_w * 0.8 / len(metrics)

    def sy(v):
        return py0 + min(max(v, 0.0), 1.0) * (py1 - py0)

    out = _header("Ablation: mean over seeds")
    out.append(f'<line x1="{px0}" y1="{py0}" x2="{px1}" y2="{py0}" stroke="black"/>')
    out.append(f'<line x1="{px0}" y1="{py0}" x2="{px0}" y2="{py1}" stroke="black"/>')
    for t in _ticks(0.0, 1.0):
        out.append(f'<text x="{px0 - 5}" y="{_n(sy(t))}" text-anchor="end">{t:.1f}</text>')
    for g, row in enumerate(rows):
        gx = px0 + g * group_w + group_w * 0.1
        for k, m in enumerate(metrics):
            mean, std = row.mean.get(m, float("nan")), row.std.get(m, float("nan"))
            x = gx + k * bar_w
            if math.isnan(mean):
                continue
            out.append(f'<rect class="bar" data-run="{row.name}" data-metric="{m}" x="{_n(x)}" '
                       f'y="{_n(sy(mean))}" width="{_n(bar_w)}" height="{_n(py0 - sy(mean))}" '
                       f'fill="{COLORS[k % len(COLORS)]}"/>')
            cx = _n(x + bar_w / 2)
            out.append(f'<line x1="{cx}" y1="{_n(sy(mean - std))}" x2="{cx}" y2="{_n(sy(mean + std))}" '
                       f'stroke="black"/>')
        label = row.name if row.status == "ok" else f"{row.name} ({row.status})"
        out.append(f'<text x="{_n(px0 + (g + 0.5) * group_w)}" y="{py0 + 15}" text-anchor="middle">{label}</text>')
    for k, m in enumerate(metrics):
        out.append(f'<text x="{px1 - 80 + 40 * k}" y="{TOP + 12}" fill="{COLORS[k % len(COLORS)]}">{m}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def emit_ablation_chart(table: "ResultTable", path) -> Path:
    p = Path(path)
    p.write_text(ablation_chart_svg(table))
    return p
