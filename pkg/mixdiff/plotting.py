"""
Minimal native SVG line plots

Element order is fixed (background, axes, ticks, labels, polyline, markers,
title) and every number is printed with fixed precision, so identical data
gives identical files.
"""

import logging
from pathlib import Path
from typing import Sequence, Union

import numpy as np

logger = logging.getLogger(__name__)

WIDTH = 480
HEIGHT = 320
MARGIN = 56
NUM_TICKS = 5


def _fmt(value: float) -> str:
    return f"{value:.2f}"


def _label(value: float) -> str:
    return f"{value:.4g}"


def _axis_range(values: np.ndarray):
    low, high = float(np.min(values)), float(np.max(values))
    if high - low < 1e-12:
        pad = max(abs(low), 1.0) * 0.05
        return low - pad, high + pad
    return low, high


def line_plot_svg(xs: Sequence[float], ys: Sequence[float], title: str,
                  x_label: str, y_label: str) -> str:
    """Render one series as an SVG document string"""
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    if xs.shape != ys.shape or xs.ndim != 1 or len(xs) == 0:
        raise ValueError("line plot needs two equal-length, non-empty series")
    if not (np.all(np.isfinite(xs)) and np.all(np.isfinite(ys))):
        raise ValueError("line plot values must be finite")

    x_low, x_high = _axis_range(xs)
    y_low, y_high = _axis_range(ys)
    plot_w = WIDTH - 2 * MARGIN
    plot_h = HEIGHT - 2 * MARGIN

    def px(x):
        return MARGIN + (x - x_low) / (x_high - x_low) * plot_w

    def py(y):
        return HEIGHT - MARGIN - (y - y_low) / (y_high - y_low) * plot_h

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
        f'viewBox="0 0 {WIDTH} {HEIGHT}">',
        f'<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
        f'<line class="axis" x1="{MARGIN}" y1="{HEIGHT - MARGIN}" x2="{WIDTH - MARGIN}" '
        f'y2="{HEIGHT - MARGIN}" stroke="black"/>',
        f'<line class="axis" x1="{MARGIN}" y1="{MARGIN}" x2="{MARGIN}" '
        f'y2="{HEIGHT - MARGIN}" stroke="black"/>',
    ]
    for i in range(NUM_TICKS):
        xv = x_low + (x_high - x_low) * i / (NUM_TICKS - 1)
        out.append(f'<text class="xtick" x="{_fmt(px(xv))}" y="{HEIGHT - MARGIN + 16}" '
                   f'font-size="10" text-anchor="middle">{_label(xv)}</text>')
    for i in range(NUM_TICKS):
        yv = y_low + (y_high - y_low) * i / (NUM_TICKS - 1)
        out.append(f'<text class="ytick" x="{MARGIN - 6}" y="{_fmt(py(yv) + 3)}" '
                   f'font-size="10" text-anchor="end">{_label(yv)}</text>')
    out.append(f'<text class="xlabel" x="{WIDTH / 2:.0f}" y="{HEIGHT - 12}" '
               f'font-size="12" text-anchor="middle">{x_label}</text>')
    out.append(f'<text class="ylabel" x="14" y="{HEIGHT / 2:.0f}" font-size="12" '
               f'text-anchor="middle" transform="rotate(-90 14 {HEIGHT / 2:.0f})">{y_label}</text>')

    points = " ".join(f"{_fmt(px(x))},{_fmt(py(y))}" for x, y in zip(xs, ys))
    out.append(f'<polyline class="series" points="{points}" fill="none" '
               f'stroke="steelblue" stroke-width="2"/>')
    for x, y in zip(xs, ys):
        out.append(f'<circle class="marker" cx="{_fmt(px(x))}" cy="{_fmt(py(y))}" r="3" '
                   f'fill="steelblue"/>')
    out.append(f'<text class="title" x="{WIDTH / 2:.0f}" y="24" font-size="14" '
               f'text-anchor="middle">{title}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def write_line_plot(path: Union[str, Path], xs, ys, title: str, x_label: str,
                    y_label: str) -> Path:
    path = Path(path)
    path.write_text(line_plot_svg(xs, ys, title, x_label, y_label), encoding="utf-8")
    logger.debug(f"Plot written to {path}")
    return path
