"""SVG charts.

Count tables are drawn by a small hand-rolled writer so output is exactly one
``<rect class="bar">`` per bin and byte-stable across library versions.  The
density profile and importance charts go through matplotlib with the SVG hash
salt and date metadata pinned, which makes them deterministic too.
"""
from __future__ import annotations

import io
from dataclasses import dataclass
from typing import Mapping, Sequence
from xml.sax.saxutils import escape

import matplotlib
from matplotlib.figure import Figure

from .descriptive import CountTable
from .errors import EmptyTable


@dataclass(frozen=True)
class ChartStyle:
    width: int = 640
    height: int = 320
    margin_left: int = 48
    margin_right: int = 12
    margin_top: int = 28
    margin_bottom: int = 56
    bar_color: str = "#3b6ea5"
    gap: float = 0.15  # fraction of each slot left empty
    title: str | None = None
    x_label: str | None = None
    y_label: str = "Crashes"
    rotate_labels: bool | None = None  # None: rotate when there are many bins


def _n(v: float) -> str:
    # fixed precision keeps the bytes stable
    return f"{v:.2f}".rstrip("0").rstrip(".")


def _nice_step(top: int) -> int:
    for step in (1, 2, 5, 10, 20, 25, 50, 100, 200, 250, 500, 1000):
        if top / step <= 6:
            return step
    return max(1, top // 5)


def render_svg_bar(table: CountTable, style: ChartStyle | None = None) -> str:
    if len(table.bins) == 0:
        raise EmptyTable("cannot chart an empty table")
    s = style or ChartStyle()
    title = s.title if s.title is not None else f"Crashes by {table.dimension.replace('_', ' ')}"
    x_label = s.x_label if s.x_label is not None else table.dimension.replace("_", " ")
    rotate = s.rotate_labels if s.rotate_labels is not None else len(table.bins) > 12

    plot_w = s.width - s.margin_left - s.margin_right
    plot_h = s.height - s.margin_top - s.margin_bottom
    x0, y0 = s.margin_left, s.margin_top + plot_h
    top = max(max(table.counts), 1)
    step = _nice_step(top)
    y_max = ((top + step - 1) // step) * step
    slot = plot_w / len(table.bins)
    bar_w = slot * (1 - s.gap)

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{s.width}" height="{s.height}" '
        f'viewBox="0 0 {s.width} {s.height}" font-family="sans-serif" font-size="10">',
        f"<title>{escape(title)}</title>",
        f'<text x="{_n(s.width / 2)}" y="16" text-anchor="middle" font-size="13">{escape(title)}</text>',
    ]
    for tick in range(0, y_max + 1, step):
        y = y0 - plot_h * tick / y_max
        out.append(f'<line x1="{x0}" y1="{_n(y)}" x2="{x0 + plot_w}" y2="{_n(y)}" stroke="#dddddd"/>')
        out.append(f'<text x="{x0 - 4}" y="{_n(y + 3)}" text-anchor="end">{tick}</text>')
    for i, (label, count) in enumerate(zip(table.bins, table.counts)):
        h = plot_h * count / y_max
        x = x0 + i * slot + (slot - bar_w) / 2
        out.append(
            f'<rect class="bar" x="{_n(x)}" y="{_n(y0 - h)}" width="{_n(bar_w)}" height="{_n(h)}" '
            f'fill="{s.bar_color}" data-bin="{escape(label)}" data-count="{count}"/>'
        )
        cx = x0 + (i + 0.5) * slot
        if rotate:
            out.append(f'<text x="{_n(cx)}" y="{y0 + 10}" text-anchor="end" '
                       f'transform="rotate(-45 {_n(cx)} {y0 + 10})">{escape(label)}</text>')
        else:
            out.append(f'<text x="{_n(cx)}" y="{y0 + 14}" text-anchor="middle">{escape(label)}</text>')
    out.append(f'<line x1="{x0}" y1="{y0}" x2="{x0 + plot_w}" y2="{y0}" stroke="#333333"/>')
    out.append(f'<line x1="{x0}" y1="{s.margin_top}" x2="{x0}" y2="{y0}" stroke="#333333"/>')
    out.append(f'<text x="{_n(x0 + plot_w / 2)}" y="{s.height - 6}" text-anchor="middle">{escape(x_label)}</text>')
    out.append(f'<text x="12" y="{_n(s.margin_top + plot_h / 2)}" text-anchor="middle" '
               f'transform="rotate(-90 12 {_n(s.margin_top + plot_h / 2)})">{escape(s.y_label)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


_MPL_RC = {"svg.hashsalt": "crashlab", "svg.fonttype": "none", "font.size": 9}


def _to_svg(fig: Figure) -> str:
    buf = io.StringIO()
    with matplotlib.rc_context(_MPL_RC):
        fig.savefig(buf, format="svg", metadata={"Date": None})
    return buf.getvalue()


def density_svg(profile, hotspots: Sequence = (), corridor_length: float | None = None) -> str:
    """Density curve over the corridor; hotspot windows are shaded."""
    with matplotlib.rc_context(_MPL_RC):
        fig = Figure(figsize=(7, 3))
        ax = fig.add_subplot()
        for spot in hotspots:
            ax.axvspan(spot.start, spot.end, color="#f4a261", alpha=0.35, lw=0)
        ax.plot(profile.grid, profile.density, color="#264653", lw=1.4)
        if corridor_length is not None:
            ax.set_xlim(0, corridor_length)
        ax.set_xlabel("Milepost (mi)")
        ax.set_ylabel("Density")
        ax.set_title(f"Kernel density of crash locations (h = {profile.bandwidth:.3f} mi)")
        fig.tight_layout()
    return _to_svg(fig)


def importance_svg(importances: Mapping[str, float], top: int = 10) -> str:
    items = sorted(importances.items(), key=lambda kv: (-kv[1], kv[0]))[:top]
    names = [k for k, _ in items][::-1]
    vals = [v for _, v in items][::-1]
    with matplotlib.rc_context(_MPL_RC):
        fig = Figure(figsize=(6, 0.35 * len(items) + 1.0))
        ax = fig.add_subplot()
        ax.barh(names, vals, color="#2a9d8f")
        for y, v in enumerate(vals):
            ax.text(v, y, f" {v:.3f}", va="center")
        ax.set_xlabel("Mean decrease in impurity")
        ax.set_xlim(0, max(vals) * 1.2 if vals else 1)
        ax.set_title("Feature importance")
        fig.tight_layout()
    return _to_svg(fig)
