"""Pose-centred, heading-up map patches and route chart splitting."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from . import kernels
from .road_graph import RoadGraph, segments_of

DEFAULT_SIZE = 64
DEFAULT_RESOLUTION = 1.0
DEFAULT_STROKE = 3.0


def wrap_angle(a):
    """Wrap radians to ``[-pi, pi)``; works on scalars and arrays."""
    w = np.mod(np.asarray(a, dtype=np.float64) + math.pi, 2.0 * math.pi) - math.pi
    w = np.where(w >= math.pi, w - 2.0 * math.pi, w)
    return float(w) if np.ndim(w) == 0 else w


class Pose(NamedTuple):
    """Planar pose; ``alpha`` = 0 faces +y and increases counter-clockwise."""

    x: float
    y: float
    alpha: float

    @property
    def heading(self) -> tuple[float, float]:
        return -math.sin(self.alpha), math.cos(self.alpha)

    def wrapped(self) -> "Pose":
        return Pose(float(self.x), float(self.y), wrap_angle(self.alpha))


@dataclass(frozen=True)
class MapPatch:
    size: int
    resolution: float
    drivable: np.ndarray
    center: Pose
    route: np.ndarray | None = None

    @property
    def routed(self) -> bool:
        return self.route is not None


class InvalidRouteError(ValueError):
    pass


def world_to_pixel(pose: Pose, point, size: int = DEFAULT_SIZE, resolution: float = DEFAULT_RESOLUTION):
    """Continuous image coordinate ``(u, v)`` (column, row) of a world point.

    Pixel ``(row i, col j)`` is centred on ``(u, v) = (j, i)``.  Accepts a
    single point or an ``(N, 2)`` array.
    """
    p = np.asarray(point, dtype=np.float64)
    dx = p[..., 0] - pose.x
    dy = p[..., 1] - pose.y
    c, s = math.cos(pose.alpha), math.sin(pose.alpha)
    half = size / 2.0
    u = half + (dx * c + dy * s) / resolution
    v = half - (dy * c - dx * s) / resolution
    return np.stack([u, v], axis=-1)


def pixel_to_world(pose: Pose, pixel, size: int = DEFAULT_SIZE, resolution: float = DEFAULT_RESOLUTION):
    q = np.asarray(pixel, dtype=np.float64)
    half = size / 2.0
    ex = (q[..., 0] - half) * resolution
    ey = (half - q[..., 1]) * resolution
    c, s = math.cos(pose.alpha), math.sin(pose.alpha)
    return np.stack([pose.x + ex * c - ey * s, pose.y + ex * s + ey * c], axis=-1)


def _check_geometry(size, resolution, stroke):
    if size < 8:
        raise ValueError(f"patch size must be >= 8 px, got {size}")
    if not resolution > 0:
        raise ValueError("resolution must be > 0")
    if stroke < resolution:
        raise ValueError("stroke must be >= resolution")


def render_patch(graph: RoadGraph, pose: Pose, route: Sequence[int] | None = None,
                 size: int = DEFAULT_SIZE, resolution: float = DEFAULT_RESOLUTION,
                 stroke: float = DEFAULT_STROKE) -> MapPatch:
    """Unrouted (``route=None``) or routed map patch centred on ``pose``."""
    _check_geometry(size, resolution, stroke)
    pose = Pose(*pose)
    pa = np.asarray([pose], dtype=np.float64)
    drivable = kernels.render_segments(graph.segments, pa, size, resolution, stroke / 2.0)[0]
    routed = None
    if route is not None:
        routed = kernels.render_segments(segments_of(graph, route), pa, size, resolution, stroke / 2.0)[0]
    return MapPatch(size, resolution, drivable, pose, routed)


def render_drivable_batch(graph: RoadGraph, poses: np.ndarray, size: int = DEFAULT_SIZE,
                          resolution: float = DEFAULT_RESOLUTION, stroke: float = DEFAULT_STROKE) -> np.ndarray:
    """Drivable channels for many poses at once, ``(N, size, size)`` uint8."""
    _check_geometry(size, resolution, stroke)
    return kernels.render_segments(graph.segments, poses, size, resolution, stroke / 2.0)


# --------------------------------------------------------------------------
# charts

@dataclass(frozen=True)
class Chart:
    edges: tuple[int, ...]
    start: int
    end: int  # exclusive index into the parent route


def check_connected(graph: RoadGraph, route: Sequence[int]) -> None:
    for k in range(1, len(route)):
        a, b = graph.edges[route[k - 1]], graph.edges[route[k]]
        if a.dst != b.src:
            raise InvalidRouteError(
                f"route is disconnected between position {k - 1} (edge {route[k - 1]}) and {k} (edge {route[k]})")


def split_charts(graph: RoadGraph, route: Sequence[int]) -> list[Chart]:
    """Greedy left-to-right split into charts without repeated nodes.

    A chart is closed early when its next edge would enter a node it already
    contains.  Returning to the chart's own first node is allowed (a pure
    loop) but ends the chart.
    """
    route = list(route)
    check_connected(graph, route)
    charts: list[Chart] = []
    start = 0
    first = None
    seen: set[int] = set()
    for k, ei in enumerate(route):
        e = graph.edges[ei]
        if k == start:
            first = e.src
            seen = {first}
        if e.dst not in seen:
            seen.add(e.dst)
        elif e.dst == first:
            charts.append(Chart(tuple(route[start:k + 1]), start, k + 1))
            start = k + 1
        else:
            charts.append(Chart(tuple(route[start:k]), start, k))
            start = k
            first = e.src
            seen = {first, e.dst}
    if start < len(route):
        charts.append(Chart(tuple(route[start:]), start, len(route)))
    return charts


def polyline_prefix(polyline, length: float) -> np.ndarray:
    """Segments ``(M, 4)`` covering the first ``length`` metres of ``polyline``."""
    pts = np.asarray(polyline, dtype=np.float64)
    rows = []
    left = length
    for p0, p1 in zip(pts[:-1], pts[1:]):
        if left <= 0:
            break
        seg = float(np.hypot(*(p1 - p0)))
        if seg > left:
            p1 = p0 + (p1 - p0) * (left / seg)
        rows.append((*p0, *p1))
        left -= seg
    return np.asarray(rows, dtype=np.float64).reshape(-1, 4)


def chart_segments(graph: RoadGraph, charts: Sequence[Chart], k: int, lead: float = 0.0) -> np.ndarray:
    """Route segments of chart ``k`` plus a stub of the following chart.

    The stub covers at most ``lead`` metres and never more than half of the
    next chart's first edge.  That edge is the one that re-enters an earlier
    node, so the stub stops short of the revisit and the drawing stays
    unambiguous while still showing which way the route leaves the chart.
    """
    segs = segments_of(graph, charts[k].edges)
    if lead <= 0 or k + 1 >= len(charts):
        return segs
    nxt = graph.edges[charts[k + 1].edges[0]]
    pl = np.asarray(nxt.polyline)
    half = 0.5 * float(np.hypot(*np.diff(pl, axis=0).T).sum())
    stub = polyline_prefix(pl, min(lead, half))
    return np.vstack([segs, stub])


def chart_nodes(graph: RoadGraph, chart: Chart) -> list[int]:
    return [graph.edges[chart.edges[0]].src] + [graph.edges[e].dst for e in chart.edges]


# --------------------------------------------------------------------------
# PGM dumps

def write_pgm(path: str | Path, grid: np.ndarray) -> None:
    g = np.clip(np.rint(np.asarray(grid, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    h, w = g.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + g.tobytes())


def read_pgm(path: str | Path) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = data.split(maxsplit=4)
    if parts[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    raw = np.frombuffer(parts[4][: w * h], dtype=np.uint8).reshape(h, w)
    return raw.astype(np.float64) / maxval


def save_patch(prefix: str | Path, patch: MapPatch) -> list[Path]:
    """Write ``<prefix>.drivable.pgm`` (+ ``.route.pgm``) and a ``.json`` sidecar."""
    prefix = Path(prefix)
    written = [prefix.with_name(prefix.name + ".drivable.pgm")]
    write_pgm(written[0], patch.drivable)
    if patch.routed:
        written.append(prefix.with_name(prefix.name + ".route.pgm"))
        write_pgm(written[-1], patch.route)
    side = prefix.with_name(prefix.name + ".json")
    side.write_text(json.dumps({
        "center": {"x": patch.center.x, "y": patch.center.y, "alpha": patch.center.alpha},
        "resolution": patch.resolution, "size": patch.size, "routed": patch.routed,
    }, indent=2, sort_keys=True) + "\n")
    written.append(side)
    return written


def load_patch(prefix: str | Path) -> MapPatch:
    prefix = Path(prefix)
    meta = json.loads(prefix.with_name(prefix.name + ".json").read_text())
    drivable = read_pgm(prefix.with_name(prefix.name + ".drivable.pgm"))
    route = read_pgm(prefix.with_name(prefix.name + ".route.pgm")) if meta["routed"] else None
    c = meta["center"]
    return MapPatch(meta["size"], meta["resolution"], drivable, Pose(c["x"], c["y"], c["alpha"]), route)
