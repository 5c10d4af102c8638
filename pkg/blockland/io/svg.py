"""
A small deterministic SVG writer and the four chart types of the reports:
line charts, heatmaps, violin plots and grouped bars.

Documents are self-contained (no scripts, fonts or images are referenced)
and numbers are written with at most three decimals, so identical inputs
give byte-identical files.
"""

import math
from typing import Any, Dict, List, Mapping, NamedTuple, Optional, Sequence, Tuple
from xml.sax.saxutils import escape, quoteattr

import numpy as np

from blockland import typechecking
from .generic import BaseIOHandler

#: sizes, fonts and the palette used by every chart
STYLE: Dict[str, Any] = {
    "width": 720,
    "height": 440,
    "margin_left": 70,
    "margin_right": 160,
    "margin_top": 40,
    "margin_bottom": 60,
    "font_family": "sans-serif",
    "font_size": 12,
    "background": "#ffffff",
    "axis": "#333333",
    "grid": "#dddddd",
    "palette": [
        "#1f77b4",
        "#ff7f0e",
        "#2ca02c",
        "#d62728",
        "#9467bd",
        "#8c564b",
        "#e377c2",
        "#7f7f7f",
        "#bcbd22",
        "#17becf",
    ],
    "heat_low": (255, 255, 255),
    "heat_high": (8, 48, 107),
}


def fmt_num(value: float) -> str:
    text = f"{float(value):.3f}".rstrip("0").rstrip(".")
    return "0" if text in ("-0", "") else text


def color(index: int) -> str:
    palette = STYLE["palette"]
    return palette[index % len(palette)]


class SvgDocument:
    """An SVG document assembled element by element."""

    def __init__(self, width: float, height: float, title: Optional[str] = None) -> None:
        self.width = width
        self.height = height
        self.elements: List[str] = []
        if title is not None:
            self.elements.append(f"<title>{escape(title)}</title>")
        self.rect(0, 0, width, height, fill=STYLE["background"])

    def add(self, tag: str, text: Optional[str] = None, **attrs: Any) -> None:
        parts = [tag]
        for key, value in attrs.items():
            if value is None:
                continue
            if isinstance(value, (int, float, np.integer, np.floating)) and not isinstance(
                value, bool
            ):
                value = fmt_num(value)
            parts.append(f"{key.rstrip('_').replace('_', '-')}={quoteattr(str(value))}")
        if text is None:
            self.elements.append(f"<{' '.join(parts)}/>")
        else:
            self.elements.append(f"<{' '.join(parts)}>{escape(text)}</{tag}>")

    def rect(self, x: float, y: float, width: float, height: float, **attrs: Any) -> None:
        self.add("rect", x=x, y=y, width=width, height=height, **attrs)

    def line(self, x1: float, y1: float, x2: float, y2: float, **attrs: Any) -> None:
        self.add("line", x1=x1, y1=y1, x2=x2, y2=y2, **attrs)

    def polyline(self, points: Sequence[Tuple[float, float]], **attrs: Any) -> None:
        joined = " ".join(f"{fmt_num(x)},{fmt_num(y)}" for x, y in points)
        self.add("polyline", points=joined, fill="none", **attrs)

    def polygon(self, points: Sequence[Tuple[float, float]], **attrs: Any) -> None:
        joined = " ".join(f"{fmt_num(x)},{fmt_num(y)}" for x, y in points)
        self.add("polygon", points=joined, **attrs)

    def circle(self, cx: float, cy: float, r: float, **attrs: Any) -> None:
        self.add("circle", cx=cx, cy=cy, r=r, **attrs)

    def text(self, x: float, y: float, content: str, **attrs: Any) -> None:
        attrs.setdefault("font_family", STYLE["font_family"])
        attrs.setdefault("font_size", STYLE["font_size"])
        self.add("text", content, x=x, y=y, **attrs)

    def to_string(self) -> str:
        header = (
            '<?xml version="1.0" encoding="UTF-8"?>\n'
            f'<svg xmlns="http://www.w3.org/2000/svg" width="{fmt_num(self.width)}" '
            f'height="{fmt_num(self.height)}" '
            f'viewBox="0 0 {fmt_num(self.width)} {fmt_num(self.height)}">\n'
        )
        return header + "".join(f" {element}\n" for element in self.elements) + "</svg>\n"


class SVGWriter(BaseIOHandler):
    """Writes one :class:`SvgDocument` to a file."""

    def __init__(self, file: typechecking.AcceptedIOType) -> None:
        super().__init__(file, mode="w")

    def write(self, document: SvgDocument) -> None:
        self.file.write(document.to_string())


def save_svg(file: typechecking.AcceptedIOType, document: SvgDocument) -> None:
    with SVGWriter(file) as writer:
        writer.write(document)  # type: ignore


def nice_ticks(low: float, high: float, count: int = 5) -> List[float]:
    """Round tick positions (steps of 1, 2 or 5 times a power of ten) covering [low, high]."""
    if not (math.isfinite(low) and math.isfinite(high)) or high <= low:
        return [low]
    raw = (high - low) / max(count, 1)
    magnitude = 10 ** math.floor(math.log10(raw))
    step = next(m * magnitude for m in (1, 2, 5, 10) if m * magnitude >= raw)
    first = math.ceil(low / step)
    last = math.floor(high / step)
    return [round(i * step, 12) for i in range(first, last + 1)]


class Axes:
    """Maps data coordinates onto the plotting box of a document."""

    def __init__(
        self,
        document: SvgDocument,
        x_range: Tuple[float, float],
        y_range: Tuple[float, float],
    ) -> None:
        self.document = document
        self.left = STYLE["margin_left"]
        self.right = document.width - STYLE["margin_right"]
        self.top = STYLE["margin_top"]
        self.bottom = document.height - STYLE["margin_bottom"]
        self.x_range = _widen(x_range)
        self.y_range = _widen(y_range)

    def x(self, value: float) -> float:
        low, high = self.x_range
        return self.left + (value - low) / (high - low) * (self.right - self.left)

    def y(self, value: float) -> float:
        low, high = self.y_range
        return self.bottom - (value - low) / (high - low) * (self.bottom - self.top)

    def draw_frame(
        self, x_label: str = "", y_label: str = "", x_ticks: bool = True
    ) -> None:
        doc = self.document
        for tick in nice_ticks(*self.y_range):
            y = self.y(tick)
            doc.line(self.left, y, self.right, y, stroke=STYLE["grid"], stroke_width=0.5)
            doc.text(self.left - 6, y + 4, fmt_num(tick), text_anchor="end")
        if x_ticks:
            for tick in nice_ticks(*self.x_range):
                x = self.x(tick)
                doc.line(x, self.bottom, x, self.bottom + 4, stroke=STYLE["axis"])
                doc.text(x, self.bottom + 18, fmt_num(tick), text_anchor="middle")
        doc.line(self.left, self.bottom, self.right, self.bottom, stroke=STYLE["axis"])
        doc.line(self.left, self.top, self.left, self.bottom, stroke=STYLE["axis"])
        if x_label:
            doc.text((self.left + self.right) / 2, doc.height - 16, x_label, text_anchor="middle")
        if y_label:
            cx, cy = 16, (self.top + self.bottom) / 2
            doc.text(cx, cy, y_label, text_anchor="middle", transform=f"rotate(-90 {cx} {fmt_num(cy)})")

    def legend(self, labels: Sequence[str]) -> None:
        x = self.right + 16
        for index, label in enumerate(labels):
            y = self.top + 18 * index
            self.document.rect(x, y, 12, 12, fill=color(index))
            self.document.text(x + 18, y + 10, label)


def _widen(bounds: Tuple[float, float]) -> Tuple[float, float]:
    low, high = float(bounds[0]), float(bounds[1])
    if high <= low:
        pad = abs(low) * 0.1 or 1.0
        return low - pad, high + pad
    return low, high


def line_chart(
    series: Mapping[str, Sequence[Tuple[float, float]]],
    title: str,
    x_label: str = "",
    y_label: str = "",
) -> SvgDocument:
    """One polyline per series, in the order of ``series``."""
    doc = SvgDocument(STYLE["width"], STYLE["height"], title)
    points = [p for values in series.values() for p in values]
    xs = [p[0] for p in points] or [0.0]
    ys = [p[1] for p in points] or [0.0]
    axes = Axes(doc, (min(xs), max(xs)), (min(0.0, min(ys)), max(ys)))
    axes.draw_frame(x_label, y_label)
    for index, values in enumerate(series.values()):
        doc.polyline(
            [(axes.x(x), axes.y(y)) for x, y in values], stroke=color(index), stroke_width=1.5
        )
    axes.legend(list(series.keys()))
    doc.text(doc.width / 2, 20, title, text_anchor="middle")
    return doc


def heatmap_chart(
    counts: np.ndarray,
    x_range: Tuple[float, float],
    y_range: Tuple[float, float],
    title: str,
) -> SvgDocument:
    """Cells shaded by count; ``counts[i, j]`` is column ``i`` (x) and row ``j`` (y)."""
    doc = SvgDocument(STYLE["width"], STYLE["height"], title)
    axes = Axes(doc, x_range, y_range)
    n_x, n_y = counts.shape
    cell_w = (x_range[1] - x_range[0]) / n_x
    cell_h = (y_range[1] - y_range[0]) / n_y
    peak = float(counts.max()) if counts.size else 0.0
    low, high = STYLE["heat_low"], STYLE["heat_high"]
    for i in range(n_x):
        for j in range(n_y):
            share = counts[i, j] / peak if peak > 0 else 0.0
            rgb = tuple(int(round(a + (b - a) * share)) for a, b in zip(low, high))
            x0 = x_range[0] + i * cell_w
            y1 = y_range[0] + (j + 1) * cell_h
            doc.rect(
                axes.x(x0),
                axes.y(y1),
                axes.x(x0 + cell_w) - axes.x(x0),
                axes.y(y1 - cell_h) - axes.y(y1),
                fill="#{:02x}{:02x}{:02x}".format(*rgb),
            )
    axes.draw_frame("x", "y")
    doc.text(doc.width / 2, 20, title, text_anchor="middle")
    doc.text(axes.right + 16, axes.top + 10, f"max {int(peak)} visits")
    return doc


class Violin(NamedTuple):
    label: str
    #: return values at which ``density`` is evaluated, ascending
    grid: Sequence[float]
    #: density scaled to [0, 1]; empty for a degenerate distribution
    density: Sequence[float]
    quartiles: Tuple[float, float, float]
    mean: float
    minimum: float
    maximum: float


def violin_chart(violins: Sequence[Violin], title: str, y_label: str = "return") -> SvgDocument:
    """One violin per distribution; degenerate distributions are drawn as a bar."""
    doc = SvgDocument(max(STYLE["width"], 90 * len(violins) + 240), STYLE["height"], title)
    lows = [v.minimum for v in violins] + [min(v.grid) for v in violins if len(v.grid)]
    highs = [v.maximum for v in violins] + [max(v.grid) for v in violins if len(v.grid)]
    axes = Axes(doc, (0.0, float(max(len(violins), 1))), (min(lows or [0.0]), max(highs or [1.0])))
    axes.draw_frame("", y_label, x_ticks=False)
    half_width = 0.4 * (axes.x(1.0) - axes.x(0.0))
    for index, violin in enumerate(violins):
        center = axes.x(index + 0.5)
        if len(violin.density):
            right = [(center + half_width * d, axes.y(g)) for g, d in zip(violin.grid, violin.density)]
            left = [(center - half_width * d, axes.y(g)) for g, d in zip(violin.grid, violin.density)]
            doc.polygon(right + left[::-1], fill=color(index), fill_opacity=0.5, stroke=color(index))
        else:
            y = axes.y(violin.mean)
            doc.rect(center - half_width, y - 1.5, 2 * half_width, 3, fill=color(index))
        q1, median, q3 = violin.quartiles
        doc.line(center, axes.y(violin.minimum), center, axes.y(violin.maximum), stroke=STYLE["axis"])
        doc.rect(center - 4, axes.y(q3), 8, max(axes.y(q1) - axes.y(q3), 0.0), fill=STYLE["axis"])
        doc.circle(center, axes.y(median), 3, fill=STYLE["background"])
        doc.text(center, axes.bottom + 18, violin.label, text_anchor="middle")
    doc.text(doc.width / 2, 20, title, text_anchor="middle")
    return doc


def grouped_bar_chart(
    groups: Sequence[str],
    series: Sequence[str],
    values: Sequence[Sequence[Optional[float]]],
    title: str,
    y_label: str = "mean return",
) -> SvgDocument:
    """``values[g][s]`` is the bar of series ``s`` in group ``g``; None leaves a gap."""
    doc = SvgDocument(
        max(STYLE["width"], 24 * len(groups) * max(len(series), 1) + 240), STYLE["height"], title
    )
    finite = [v for row in values for v in row if v is not None]
    axes = Axes(doc, (0.0, float(max(len(groups), 1))), (min(finite + [0.0]), max(finite + [0.0])))
    axes.draw_frame("", y_label, x_ticks=False)
    group_width = axes.x(1.0) - axes.x(0.0)
    bar_width = 0.8 * group_width / max(len(series), 1)
    zero = axes.y(0.0)
    for g, group in enumerate(groups):
        start = axes.x(g) + 0.1 * group_width
        for s in range(len(series)):
            value = values[g][s]
            if value is None:
                continue
            top = min(axes.y(value), zero)
            doc.rect(start + s * bar_width, top, bar_width, abs(axes.y(value) - zero), fill=color(s))
        doc.text(axes.x(g + 0.5), axes.bottom + 18, group, text_anchor="middle")
    axes.legend(list(series))
    doc.text(doc.width / 2, 20, title, text_anchor="middle")
    return doc
