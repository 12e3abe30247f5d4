"""Self-contained SVG figures.

Output depends only on the inputs: numbers are formatted with a fixed
precision and nothing time- or environment-dependent is written.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence
from xml.sax.saxutils import escape

from .io import atomic_write_text

W, H = 480, 320
LEFT, RIGHT, TOP, BOTTOM = 60, 20, 30, 50
PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")


class ReportError(ValueError):
    pass


@dataclass(frozen=True)
class Figure:
    """One figure request.

    ``kind`` is ``line`` (each series maps to x/y lists), ``bars`` (each
    series is one value per category) or ``heatmap`` (one series holding a
    square matrix).  ``series`` names keys of the metrics mapping.
    """

    name: str
    kind: str
    series: tuple[str, ...]
    title: str = ""
    x: str | None = None               # metrics key holding x values or category labels
    xlabel: str = ""
    ylabel: str = ""


def _f(v: float) -> str:
    return f"{v:.2f}"


def _series(metrics: Mapping, key: str) -> list:
    if key not in metrics:
        raise ReportError(f"missing metric series {key!r}")
    vals = list(metrics[key])
    if not vals:
        raise ReportError(f"metric series {key!r} is empty")
    return vals


def _range(vals: Sequence[float]) -> tuple[float, float]:
    lo, hi = min(vals), max(vals)
    if not (math.isfinite(lo) and math.isfinite(hi)):
        raise ReportError("non-finite value in a metric series")
    if hi - lo < 1e-12:
        lo, hi = lo - 0.5, hi + 0.5
    pad = 0.05 * (hi - lo)
    return lo - pad, hi + pad


def _frame(title: str, xlabel: str, ylabel: str) -> list[str]:
    return [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">',
        f'<rect width="{W}" height="{H}" fill="white"/>',
        f'<text x="{W / 2}" y="18" text-anchor="middle" font-size="14">{escape(title)}</text>',
        f'<line x1="{LEFT}" y1="{H - BOTTOM}" x2="{W - RIGHT}" y2="{H - BOTTOM}" stroke="black"/>',
        f'<line x1="{LEFT}" y1="{TOP}" x2="{LEFT}" y2="{H - BOTTOM}" stroke="black"/>',
        f'<text x="{(LEFT + W - RIGHT) / 2}" y="{H - 10}" text-anchor="middle" font-size="12">{escape(xlabel)}</text>',
        f'<text x="14" y="{(TOP + H - BOTTOM) / 2}" text-anchor="middle" font-size="12" '
        f'transform="rotate(-90 14 {(TOP + H - BOTTOM) / 2})">{escape(ylabel)}</text>',
    ]


def _y_ticks(lo: float, hi: float, sy) -> list[str]:
    out = []
    for k in range(5):
        v = lo + (hi - lo) * k / 4
        y = sy(v)
        out.append(f'<line x1="{LEFT - 4}" y1="{_f(y)}" x2="{LEFT}" y2="{_f(y)}" stroke="black"/>')
        out.append(f'<text x="{LEFT - 6}" y="{_f(y + 4)}" text-anchor="end" font-size="10">{v:.3g}</text>')
    return out


def _legend(names: Sequence[str]) -> list[str]:
    out = []
    for k, name in enumerate(names):
        y = TOP + 4 + 14 * k
        out.append(f'<rect x="{W - RIGHT - 110}" y="{y}" width="10" height="10" fill="{PALETTE[k % len(PALETTE)]}"/>')
        out.append(f'<text x="{W - RIGHT - 96}" y="{y + 9}" font-size="10">{escape(name)}</text>')
    return out


def line_svg(fig: Figure, metrics: Mapping) -> str:
    if fig.x is None:
        raise ReportError(f"figure {fig.name!r} needs an x series")
    xs = [float(v) for v in _series(metrics, fig.x)]
    ys = {}
    for key in fig.series:
        vals = [float(v) for v in _series(metrics, key)]
        if len(vals) != len(xs):
            raise ReportError(f"series {key!r} has {len(vals)} points but {fig.x!r} has {len(xs)}")
        ys[key] = vals
    x0, x1 = _range(xs)
    y0, y1 = _range([v for vals in ys.values() for v in vals])

    def sx(v):
        return LEFT + (v - x0) / (x1 - x0) * (W - LEFT - RIGHT)

    def sy(v):
        return H - BOTTOM - (v - y0) / (y1 - y0) * (H - TOP - BOTTOM)

    parts = _frame(fig.title, fig.xlabel, fig.ylabel) + _y_ticks(y0, y1, sy)
    for x in xs:
        parts.append(f'<text x="{_f(sx(x))}" y="{H - BOTTOM + 14}" text-anchor="middle" font-size="10">{x:.3g}</text>')
    for k, (key, vals) in enumerate(ys.items()):
        colour = PALETTE[k % len(PALETTE)]
        pts = " ".join(f"{_f(sx(x))},{_f(sy(y))}" for x, y in zip(xs, vals))
        if len(vals) > 1:
            parts.append(f'<polyline points="{pts}" fill="none" stroke="{colour}" stroke-width="1.5"/>')
        for x, y in zip(xs, vals):
            parts.append(f'<circle class="marker" cx="{_f(sx(x))}" cy="{_f(sy(y))}" r="3" fill="{colour}"/>')
    parts += _legend(list(ys))
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def bars_svg(fig: Figure, metrics: Mapping) -> str:
    groups = {key: [float(v) for v in _series(metrics, key)] for key in fig.series}
    n = len(next(iter(groups.values())))
    if any(len(v) != n for v in groups.values()):
        raise ReportError(f"bar series of figure {fig.name!r} differ in length")
    labels = [str(v) for v in _series(metrics, fig.x)] if fig.x else [str(i) for i in range(n)]
    if len(labels) != n:
        raise ReportError(f"{fig.x!r} has {len(labels)} labels for {n} categories")
    y0, y1 = _range([0.0] + [v for vals in groups.values() for v in vals])

    def sy(v):
        return H - BOTTOM - (v - y0) / (y1 - y0) * (H - TOP - BOTTOM)

    parts = _frame(fig.title, fig.xlabel, fig.ylabel) + _y_ticks(y0, y1, sy)
    parts.append(f'<line x1="{LEFT}" y1="{_f(sy(0.0))}" x2="{W - RIGHT}" y2="{_f(sy(0.0))}" stroke="gray"/>')
    slot = (W - LEFT - RIGHT) / n
    bw = 0.8 * slot / len(groups)
    for c, label in enumerate(labels):
        parts.append(f'<text x="{_f(LEFT + (c + 0.5) * slot)}" y="{H - BOTTOM + 14}" text-anchor="middle" '
                     f'font-size="10">{escape(label)}</text>')
        for k, vals in enumerate(groups.values()):
            x = LEFT + c * slot + 0.1 * slot + k * bw
            top, bot = sorted((sy(vals[c]), sy(0.0)))
            parts.append(f'<rect class="marker" x="{_f(x)}" y="{_f(top)}" width="{_f(bw)}" height="{_f(bot - top)}" '
                         f'fill="{PALETTE[k % len(PALETTE)]}"/>')
    parts += _legend(list(groups))
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def heatmap_svg(fig: Figure, metrics: Mapping) -> str:
    if len(fig.series) != 1:
        raise ReportError(f"heatmap {fig.name!r} takes exactly one series")
    rows = [[float(v) for v in r] for r in _series(metrics, fig.series[0])]
    n = len(rows)
    if any(len(r) != len(rows[0]) or not r for r in rows):
        raise ReportError(f"series {fig.series[0]!r} is not a rectangular matrix")
    m = len(rows[0])
    labels = [str(v) for v in _series(metrics, fig.x)] if fig.x else [str(i) for i in range(max(n, m))]
    lo, hi = min(map(min, rows)), max(map(max, rows))
    span = hi - lo if hi > lo else 1.0
    cell = min((W - LEFT - RIGHT) / m, (H - TOP - BOTTOM) / n)
    parts = _frame(fig.title, fig.xlabel, fig.ylabel)
    for i, r in enumerate(rows):
        for j, v in enumerate(r):
            shade = int(round(255 * (1.0 - (v - lo) / span)))
            parts.append(f'<rect class="marker" x="{_f(LEFT + j * cell)}" y="{_f(TOP + i * cell)}" width="{_f(cell)}" '
                         f'height="{_f(cell)}" fill="rgb({shade},{shade},255)"><title>{v:.4g}</title></rect>')
    for k in range(min(len(labels), max(n, m))):
        if k < m:
            parts.append(f'<text x="{_f(LEFT + (k + 0.5) * cell)}" y="{_f(TOP + n * cell + 12)}" '
                         f'text-anchor="middle" font-size="9">{escape(labels[k])}</text>')
        if k < n:
            parts.append(f'<text x="{LEFT - 4}" y="{_f(TOP + (k + 0.5) * cell + 3)}" text-anchor="end" '
                         f'font-size="9">{escape(labels[k])}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


_RENDERERS = {"line": line_svg, "bars": bars_svg, "heatmap": heatmap_svg}


def render_figure(fig: Figure, metrics: Mapping) -> str:
    try:
        return _RENDERERS[fig.kind](fig, metrics)
    except KeyError:
        raise ReportError(f"unknown figure kind {fig.kind!r}") from None


def emit_report(metrics: Mapping, figures: Sequence[Figure], output_dir: str | Path) -> list[Path]:
    """Render every figure first, then write them; a bad figure writes nothing."""
    rendered = [(fig.name, render_figure(fig, metrics)) for fig in figures]
    out = Path(output_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for name, text in rendered:
        path = out / f"{name}.svg"
        atomic_write_text(path, text)
        paths.append(path)
    return paths
