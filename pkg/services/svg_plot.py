"""Minimal hand-written SVG scatter/line charts for sweep outputs."""
import math
from pathlib import Path
from typing import List, Sequence, Tuple

COLORS = [
    "#1f77b4",
    "#d62728",
    "#2ca02c",
    "#ff7f0e",
    "#9467bd",
    "#8c564b",
]

WIDTH = 960
HEIGHT = 600
MARGIN_LEFT = 90
MARGIN_RIGHT = 240
MARGIN_TOP = 60
MARGIN_BOTTOM = 80
TICKS = 5

Series = Tuple[str, Sequence[Tuple[float, float]]]


def _escape(text: str) -> str:
    return (
        text.replace("&", "&amp;")
        .replace("<", "&lt;")
        .replace(">", "&gt;")
        .replace('"', "&quot;")
    )


def _bounds(values: List[float]) -> Tuple[float, float]:
    low, high = min(values), max(values)
    if high - low <= 0:
        pad = abs(low) * 0.05 or 1.0
        return low - pad, high + pad
    pad = (high - low) * 0.05
    return low - pad, high + pad


def render_xy_chart(title: str, x_label: str, y_label: str, series: Sequence[Series]) -> str:
    """
    Render one chart: a polyline through each series' points (sorted by x),
    a marker per point, linear axes and a legend. Non-finite points are dropped.
    """
    clean = [
        (label, sorted((float(x), float(y)) for x, y in points if math.isfinite(x) and math.isfinite(y)))
        for label, points in series
    ]
    xs = [x for _, points in clean for x, _ in points]
    ys = [y for _, points in clean for _, y in points]

    plot_left, plot_right = MARGIN_LEFT, WIDTH - MARGIN_RIGHT
    plot_top, plot_bottom = MARGIN_TOP, HEIGHT - MARGIN_BOTTOM

    lines = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">',
        '<rect x="0" y="0" width="100%" height="100%" fill="#ffffff"/>',
        f'<text x="{WIDTH / 2:.1f}" y="32" text-anchor="middle" font-size="20" font-family="Arial">{_escape(title)}</text>',
    ]

    if not xs:
        lines.append(
            f'<text x="{WIDTH / 2:.1f}" y="{HEIGHT / 2:.1f}" text-anchor="middle" font-size="16" '
            f'font-family="Arial">no finite data</text>'
        )
        lines.append("</svg>")
        return "\n".join(lines) + "\n"

    x_min, x_max = _bounds(xs)
    y_min, y_max = _bounds(ys)

    def x_px(x: float) -> float:
        return plot_left + (x - x_min) / (x_max - x_min) * (plot_right - plot_left)

    def y_px(y: float) -> float:
        return plot_bottom - (y - y_min) / (y_max - y_min) * (plot_bottom - plot_top)

    for i in range(TICKS + 1):
        yv = y_min + (y_max - y_min) * i / TICKS
        y = y_px(yv)
        lines.append(f'<line x1="{plot_left}" y1="{y:.2f}" x2="{plot_right}" y2="{y:.2f}" stroke="#e0e0e0" stroke-width="1"/>')
        lines.append(
            f'<text x="{plot_left - 8}" y="{y + 4:.2f}" text-anchor="end" font-size="12" font-family="Arial">{yv:.4g}</text>'
        )
        xv = x_min + (x_max - x_min) * i / TICKS
        x = x_px(xv)
        lines.append(f'<line x1="{x:.2f}" y1="{plot_bottom}" x2="{x:.2f}" y2="{plot_bottom + 6}" stroke="#000000" stroke-width="1"/>')
        lines.append(
            f'<text x="{x:.2f}" y="{plot_bottom + 22}" text-anchor="middle" font-size="12" font-family="Arial">{xv:.4g}</text>'
        )

    # Axes
    lines.append(f'<line x1="{plot_left}" y1="{plot_bottom}" x2="{plot_right}" y2="{plot_bottom}" stroke="#000000" stroke-width="2"/>')
    lines.append(f'<line x1="{plot_left}" y1="{plot_top}" x2="{plot_left}" y2="{plot_bottom}" stroke="#000000" stroke-width="2"/>')
    lines.append(
        f'<text x="{(plot_left + plot_right) / 2:.1f}" y="{HEIGHT - 28}" text-anchor="middle" font-size="14" '
        f'font-family="Arial">{_escape(x_label)}</text>'
    )
    lines.append(
        f'<text x="24" y="{(plot_top + plot_bottom) / 2:.1f}" text-anchor="middle" font-size="14" font-family="Arial" '
        f'transform="rotate(-90 24 {(plot_top + plot_bottom) / 2:.1f})">{_escape(y_label)}</text>'
    )

    legend_x = plot_right + 20
    for idx, (label, points) in enumerate(clean):
        color = COLORS[idx % len(COLORS)]
        if points:
            poly = " ".join(f"{x_px(x):.2f},{y_px(y):.2f}" for x, y in points)
            lines.append(f'<polyline fill="none" stroke="{color}" stroke-width="2" points="{poly}"/>')
            for x, y in points:
                lines.append(f'<circle cx="{x_px(x):.2f}" cy="{y_px(y):.2f}" r="4" fill="{color}"/>')
        ly = plot_top + 20 + idx * 24
        lines.append(f'<line x1="{legend_x}" y1="{ly}" x2="{legend_x + 24}" y2="{ly}" stroke="{color}" stroke-width="3"/>')
        lines.append(
            f'<text x="{legend_x + 32}" y="{ly + 4}" text-anchor="start" font-size="13" font-family="Arial">{_escape(label)}</text>'
        )

    lines.append("</svg>")
    return "\n".join(lines) + "\n"


def write_xy_chart_svg(output_path: Path, title: str, x_label: str, y_label: str, series: Sequence[Series]) -> None:
    Path(output_path).write_text(render_xy_chart(title, x_label, y_label, series))
