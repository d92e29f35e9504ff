"""Self-contained SVG charts: line panels with IQR bands, heatmaps, dual-axis lines.

Output depends only on the data and style (fixed number formatting, no
timestamps), so identical inputs give identical bytes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence, Union

from ..matrix_core import ConfigurationError
from .aggregate import AggregateSeries

__all__ = ["Panel", "Heatmap", "DualAxis", "ChartStyle", "emit_svg", "render_svg", "axis_range"]

COLORS = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#17becf"]


@dataclass(frozen=True)
class ChartStyle:
    panel_width: int = 360
    panel_height: int = 260
    margin_left: int = 70
    margin_right: int = 20
    margin_top: int = 40
    margin_bottom: int = 50
    font: str = "Helvetica, Arial, sans-serif"
    band_opacity: float = 0.2


@dataclass(frozen=True)
class Panel:
    title: str
    series: tuple[AggregateSeries, ...]
    x_label: str = ""
    y_label: str = ""
    log_y: bool = False
    hline: Optional[float] = None


@dataclass(frozen=True)
class Heatmap:
    title: str
    values: tuple[tuple[float, ...], ...]  # rows x cols, already on the display scale
    row_labels: tuple[str, ...]
    col_labels: tuple[str, ...]
    x_label: str = ""
    y_label: str = ""
    marks: tuple[int, ...] = ()  # per-row column index to star


@dataclass(frozen=True)
class DualAxis:
    title: str
    left: AggregateSeries
    right: AggregateSeries
    x_label: str = ""
    left_label: str = ""
    right_label: str = ""
    categorical_x: bool = False  # evenly spaced x positions labelled with the values


Chart = Union[Sequence[Panel], Panel, Heatmap, DualAxis]


def _esc(text: str) -> str:
    return (
        str(text)
        .replace("&", "&amp;")
        .replace("<", "&lt;")
        .replace(">", "&gt;")
        .replace('"', "&quot;")
    )


def _fmt(v: float) -> str:
    if v == 0 or not math.isfinite(v):
        return "0" if v == 0 else "nan"
    a = abs(v)
    if a >= 1e4 or a < 1e-2:
        return f"{v:.2g}"
    if a >= 100:
        return f"{v:.0f}"
    return f"{v:.3g}"


def axis_range(values: Sequence[float], pad: float = 0.05) -> tuple[float, float]:
    """Padded [lo, hi] covering every finite value."""
    finite = [v for v in values if math.isfinite(v)]
    if not finite:
        return 0.0, 1.0
    lo, hi = min(finite), max(finite)
    if hi == lo:
        span = abs(hi) * 0.1 or 1.0
        return lo - span, hi + span
    span = hi - lo
    return lo - pad * span, hi + pad * span


def _ticks(lo: float, hi: float, count: int = 5) -> list[float]:
    return [lo + (hi - lo) * i / (count - 1) for i in range(count)]


class _Canvas:
    def __init__(self, width: int, height: int, style: ChartStyle):
        self.style = style
        self.width = width
        self.height = height
        self.parts = [
            f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
            f'viewBox="0 0 {width} {height}" font-family="{_esc(style.font)}">',
            f'<rect x="0" y="0" width="{width}" height="{height}" fill="#ffffff"/>',
        ]

    def add(self, s: str) -> None:
        self.parts.append(s)

    def text(self, x, y, s, size=12, anchor="middle", extra="") -> None:
        self.add(f'<text x="{x:.2f}" y="{y:.2f}" font-size="{size}" text-anchor="{anchor}"{extra}>{_esc(s)}</text>')

    def line(self, x1, y1, x2, y2, stroke="#000000", width=1.0, dash=None) -> None:
        d = f' stroke-dasharray="{dash}"' if dash else ""
        self.add(f'<line x1="{x1:.2f}" y1="{y1:.2f}" x2="{x2:.2f}" y2="{y2:.2f}" stroke="{stroke}" stroke-width="{width}"{d}/>')

    def finish(self) -> str:
        return "\n".join(self.parts + ["</svg>"]) + "\n"


def _series_y(s: AggregateSeries, log_y: bool):
    def tr(v):
        if log_y:
            return math.log10(v) if v > 0 else float("nan")
        return v

    return [tr(v) for v in s.median], [tr(v) for v in s.q25], [tr(v) for v in s.q75]


def _draw_panel(c: _Canvas, panel: Panel, ox: float, oy: float) -> None:
    st = c.style
    left, top = ox + st.margin_left, oy + st.margin_top
    w = st.panel_width - st.margin_left - st.margin_right
    h = st.panel_height - st.margin_top - st.margin_bottom
    xs = [x for s in panel.series for x in s.x]
    ys = []
    for s in panel.series:
        med, lo, hi = _series_y(s, panel.log_y)
        ys += med + lo + hi
    if panel.hline is not None:
        ys.append(math.log10(panel.hline) if panel.log_y else panel.hline)
    x0, x1 = axis_range(xs, pad=0.0)
    y0, y1 = axis_range(ys)

    def px(x):
        return left + (x - x0) / (x1 - x0) * w

    def py(y):
        return top + h - (y - y0) / (y1 - y0) * h

    c.text(left + w / 2, oy + 22, panel.title, size=14)
    for t in _ticks(y0, y1):
        c.line(left, py(t), left + w, py(t), stroke="#e0e0e0")
        label = _fmt(10**t) if panel.log_y else _fmt(t)
        c.text(left - 6, py(t) + 4, label, size=10, anchor="end")
    xt = sorted(set(xs)) if len(set(xs)) <= 12 else _ticks(x0, x1)
    for t in xt:
        c.line(px(t), top + h, px(t), top + h + 4)
        c.text(px(t), top + h + 16, _fmt(t), size=10)
    c.line(left, top + h, left + w, top + h, width=1.5)
    c.line(left, top, left, top + h, width=1.5)
    if panel.hline is not None:
        yv = math.log10(panel.hline) if panel.log_y else panel.hline
        c.line(left, py(yv), left + w, py(yv), stroke="#555555", dash="4,3")
    legend = []
    for i, s in enumerate(panel.series):
        color = COLORS[i % len(COLORS)]
        med, lo, hi = _series_y(s, panel.log_y)
        pts = [(x, m, a, b) for x, m, a, b in zip(s.x, med, lo, hi) if math.isfinite(m)]
        if not pts:
            continue
        band = [f"{px(x):.2f},{py(b):.2f}" for x, _, _, b in pts]
        band += [f"{px(x):.2f},{py(a):.2f}" for x, _, a, _ in reversed(pts)]
        c.add(f'<polygon points="{" ".join(band)}" fill="{color}" fill-opacity="{st.band_opacity}" stroke="none"/>')
        path = " ".join(f"{px(x):.2f},{py(m):.2f}" for x, m, _, _ in pts)
        c.add(f'<polyline points="{path}" fill="none" stroke="{color}" stroke-width="1.8"/>')
        if len(pts) <= 12:
            for x, m, _, _ in pts:
                c.add(f'<circle cx="{px(x):.2f}" cy="{py(m):.2f}" r="3" fill="{color}"/>')
        legend.append((s.label, color))
    if legend:
        lw = 28 + 6 * max(len(lab) for lab, _ in legend)
        lx = left + w - lw - 4
        c.add(
            f'<rect x="{lx:.2f}" y="{top + 2:.2f}" width="{lw}" height="{14 * len(legend) + 6}" '
            f'fill="#ffffff" fill-opacity="0.85" stroke="#cccccc"/>'
        )
        for i, (lab, color) in enumerate(legend):
            ly = top + 16 + 14 * i
            c.line(lx + 4, ly - 4, lx + 20, ly - 4, stroke=color, width=2)
            c.text(lx + 24, ly, lab, size=10, anchor="start")
    c.text(left + w / 2, oy + st.panel_height - 12, panel.x_label, size=12)
    c.text(
        ox + 14,
        top + h / 2,
        panel.y_label,
        size=12,
        extra=f' transform="rotate(-90 {ox + 14:.2f} {top + h / 2:.2f})"',
    )


def _render_panels(panels: Sequence[Panel], style: ChartStyle) -> str:
    c = _Canvas(style.panel_width * len(panels), style.panel_height, style)
    for i, p in enumerate(panels):
        _draw_panel(c, p, i * style.panel_width, 0)
    return c.finish()


def _heat_color(t: float) -> str:
    # light yellow -> dark blue
    t = min(max(t, 0.0), 1.0)
    a, b = (255, 247, 188), (8, 48, 107)
    r, g, bl = (int(round(a[j] + (b[j] - a[j]) * t)) for j in range(3))
    return f"#{r:02x}{g:02x}{bl:02x}"


def _render_heatmap(hm: Heatmap, style: ChartStyle) -> str:
    rows, cols = len(hm.values), len(hm.col_labels)
    cw, ch = 70, 36
    left, top = 90, 50
    width = left + cw * cols + 30
    height = top + ch * rows + 60
    c = _Canvas(width, height, style)
    c.text(width / 2, 26, hm.title, size=14)
    flat = [v for row in hm.values for v in row if math.isfinite(v)]
    lo, hi = (min(flat), max(flat)) if flat else (0.0, 1.0)
    span = (hi - lo) or 1.0
    for r, row in enumerate(hm.values):
        if len(row) != cols:
            raise ConfigurationError("heatmap rows must match the column labels")
        for j, v in enumerate(row):
            t = (v - lo) / span if math.isfinite(v) else 0.0
            x, y = left + j * cw, top + r * ch
            c.add(f'<rect x="{x}" y="{y}" width="{cw}" height="{ch}" fill="{_heat_color(t)}" stroke="#ffffff"/>')
            star = "*" if r < len(hm.marks) and hm.marks[r] == j else ""
            color = "#ffffff" if t > 0.55 else "#000000"
            c.text(x + cw / 2, y + ch / 2 + 4, f"{v:.3f}{star}" if math.isfinite(v) else "nan", size=11, extra=f' fill="{color}"')
        c.text(left - 8, top + r * ch + ch / 2 + 4, hm.row_labels[r], size=11, anchor="end")
    for j, lab in enumerate(hm.col_labels):
        c.text(left + j * cw + cw / 2, top + rows * ch + 18, lab, size=11)
    c.text(left + cw * cols / 2, top + rows * ch + 42, hm.x_label, size=12)
    c.text(18, top + rows * ch / 2, hm.y_label, size=12, extra=f' transform="rotate(-90 18 {top + rows * ch / 2:.2f})"')
    return c.finish()


def _render_dual(da: DualAxis, style: ChartStyle) -> str:
    st = style
    width = st.panel_width + 60
    c = _Canvas(width, st.panel_height, st)
    left, top = st.margin_left, st.margin_top
    w = st.panel_width - st.margin_left - st.margin_right
    h = st.panel_height - st.margin_top - st.margin_bottom

    cats = sorted(set(da.left.x) | set(da.right.x))

    def xt(x):
        return float(cats.index(x)) if da.categorical_x else x

    xs = [xt(x) for x in da.left.x + da.right.x]
    x0, x1 = axis_range(xs, pad=0.02)

    def px(x):
        return left + (xt(x) - x0) / (x1 - x0) * w

    c.text(width / 2, 22, da.title, size=14)
    c.line(left, top + h, left + w, top + h, width=1.5)
    for x in da.left.x:
        c.line(px(x), top + h, px(x), top + h + 4)
        c.text(px(x), top + h + 16, _fmt(x), size=10)
    for side, s, color in (("left", da.left, COLORS[0]), ("right", da.right, COLORS[1])):
        y0, y1 = axis_range(list(s.median) + list(s.q25) + list(s.q75))

        def py(y, y0=y0, y1=y1):
            return top + h - (y - y0) / (y1 - y0) * h

        ax = left if side == "left" else left + w
        c.line(ax, top, ax, top + h, stroke=color, width=1.5)
        for t in _ticks(y0, y1):
            if side == "left":
                c.text(ax - 6, py(t) + 4, _fmt(t), size=10, anchor="end", extra=f' fill="{color}"')
            else:
                c.text(ax + 6, py(t) + 4, _fmt(t), size=10, anchor="start", extra=f' fill="{color}"')
        pts = [(x, m, a, b) for x, m, a, b in zip(s.x, s.median, s.q25, s.q75) if math.isfinite(m)]
        if pts:
            band = [f"{px(x):.2f},{py(b):.2f}" for x, _, _, b in pts]
            band += [f"{px(x):.2f},{py(a):.2f}" for x, _, a, _ in reversed(pts)]
            c.add(f'<polygon points="{" ".join(band)}" fill="{color}" fill-opacity="{st.band_opacity}" stroke="none"/>')
            c.add(
                f'<polyline points="{" ".join(f"{px(x):.2f},{py(m):.2f}" for x, m, _, _ in pts)}" '
                f'fill="none" stroke="{color}" stroke-width="1.8"/>'
            )
            for x, m, _, _ in pts:
                c.add(f'<circle cx="{px(x):.2f}" cy="{py(m):.2f}" r="3" fill="{color}"/>')
    c.text(left + w / 2, st.panel_height - 12, da.x_label, size=12)
    c.text(14, top + h / 2, da.left_label, size=12, extra=f' fill="{COLORS[0]}" transform="rotate(-90 14 {top + h / 2:.2f})"')
    rx = left + w + 52
    c.text(rx, top + h / 2, da.right_label, size=12, extra=f' fill="{COLORS[1]}" transform="rotate(90 {rx} {top + h / 2:.2f})"')
    return c.finish()


def render_svg(chart: Chart, style: ChartStyle | None = None) -> str:
    style = style or ChartStyle()
    if isinstance(chart, Panel):
        chart = [chart]
    if isinstance(chart, Heatmap):
        if not chart.values:
            raise ConfigurationError("heatmap has no rows")
        return _render_heatmap(chart, style)
    if isinstance(chart, DualAxis):
        if not chart.left.x or not chart.right.x:
            raise ConfigurationError("dual-axis chart needs non-empty series")
        return _render_dual(chart, style)
    panels = list(chart)
    if not panels or any(not p.series or any(len(s.x) == 0 for s in p.series) for p in panels):
        raise ConfigurationError("cannot draw an empty series")
    return _render_panels(panels, style)


def emit_svg(chart: Chart, path: str | Path, style: ChartStyle | None = None) -> Path:
    path = Path(path)
    path.write_text(render_svg(chart, style), encoding="utf-8")
    return path
