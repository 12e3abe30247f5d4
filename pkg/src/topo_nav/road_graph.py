"""Directed road networks with metric geometry.

Nodes live in a local tangent plane (metres) obtained by an equirectangular
projection about ``RoadGraph.origin``.  Edge weights are great-circle lengths
of the edge polylines, evaluated after projecting them back to lat/lon.
"""
from __future__ import annotations

import heapq
import json
import math
import xml.etree.ElementTree as ET
from dataclasses import dataclass
from functools import cached_property
from typing import Iterable, Sequence

import numpy as np

EARTH_RADIUS_M = 6_371_000.0

WORLD_KINDS = ("grid", "four-way", "t-junction", "fork", "roundabout", "composite")


class RoadGraphError(ValueError):
    """Base class for graph construction and routing failures."""


class OsmParseError(RoadGraphError):
    def __init__(self, message: str, line: int, column: int):
        super().__init__(f"{message} (line {line}, column {column})")
        self.line = line
        self.column = column


class DanglingReferenceError(RoadGraphError):
    def __init__(self, node_id: int, way_id: str | None = None):
        where = f" in way {way_id}" if way_id is not None else ""
        super().__init__(f"way references missing node id {node_id}{where}")
        self.node_id = node_id


class DegenerateWayError(RoadGraphError):
    pass


class ConfigurationError(RoadGraphError):
    pass


class NoRouteError(RoadGraphError):
    pass


@dataclass(frozen=True)
class GeoPoint:
    lat: float
    lon: float

    def __post_init__(self):
        if not -90.0 <= self.lat <= 90.0:
            raise ValueError(f"latitude {self.lat} outside [-90, 90]")
        if not -180.0 <= self.lon < 180.0:
            raise ValueError(f"longitude {self.lon} outside [-180, 180)")


def edge_weight(a: GeoPoint, b: GeoPoint) -> float:
    """Haversine great-circle distance in metres."""
    phi1 = math.radians(a.lat)
    phi2 = math.radians(b.lat)
    dphi = phi2 - phi1
    dlmb = math.radians(b.lon - a.lon)
    h = math.sin(dphi / 2.0) ** 2 + math.cos(phi1) * math.cos(phi2) * math.sin(dlmb / 2.0) ** 2
    return 2.0 * EARTH_RADIUS_M * math.asin(min(1.0, math.sqrt(h)))


def project(p: GeoPoint, origin: GeoPoint) -> tuple[float, float]:
    x = EARTH_RADIUS_M * math.radians(p.lon - origin.lon) * math.cos(math.radians(origin.lat))
    y = EARTH_RADIUS_M * math.radians(p.lat - origin.lat)
    return x, y


def unproject(x: float, y: float, origin: GeoPoint) -> GeoPoint:
    lat = origin.lat + math.degrees(y / EARTH_RADIUS_M)
    lon = origin.lon + math.degrees(x / (EARTH_RADIUS_M * math.cos(math.radians(origin.lat))))
    return GeoPoint(lat, lon)


def polyline_great_circle_length(polyline: Sequence[tuple[float, float]], origin: GeoPoint) -> float:
    pts = [unproject(x, y, origin) for x, y in polyline]
    return sum(edge_weight(a, b) for a, b in zip(pts[:-1], pts[1:]))


@dataclass(frozen=True)
class Edge:
    src: int
    dst: int
    weight: float
    polyline: tuple[tuple[float, float], ...]


@dataclass(frozen=True)
class RoadGraph:
    nodes: dict[int, tuple[float, float]]
    edges: tuple[Edge, ...]
    origin: GeoPoint = GeoPoint(0.0, 0.0)

    def __eq__(self, other):
        if not isinstance(other, RoadGraph):
            return NotImplemented
        return self.nodes == other.nodes and self.edges == other.edges and self.origin == other.origin

    def __hash__(self):
        return hash((tuple(sorted(self.nodes.items())), self.edges, self.origin))

    @cached_property
    def out_edges(self) -> dict[int, list[int]]:
        out: dict[int, list[int]] = {n: [] for n in self.nodes}
        for i, e in enumerate(self.edges):
            out[e.src].append(i)
        return out

    @cached_property
    def in_edges(self) -> dict[int, list[int]]:
        inc: dict[int, list[int]] = {n: [] for n in self.nodes}
        for i, e in enumerate(self.edges):
            inc[e.dst].append(i)
        return inc

    @cached_property
    def segments(self) -> np.ndarray:
        """All polyline segments as an ``(M, 4)`` array of ``x0, y0, x1, y1``."""
        return segments_of(self, range(len(self.edges)))

    @cached_property
    def segment_edge(self) -> np.ndarray:
        """Edge index owning each row of :attr:`segments`."""
        ids = [i for i, e in enumerate(self.edges) for _ in range(len(e.polyline) - 1)]
        return np.asarray(ids, dtype=np.int64)

    def neighbours(self, node: int) -> set[int]:
        """Undirected adjacency, used to find junctions."""
        out = {self.edges[i].dst for i in self.out_edges[node]}
        out |= {self.edges[i].src for i in self.in_edges[node]}
        out.discard(node)
        return out

    def junctions(self) -> list[int]:
        return sorted(n for n in self.nodes if len(self.neighbours(n)) >= 3)

    def validate(self, rel_tol: float = 1e-6) -> None:
        for i, e in enumerate(self.edges):
            if e.src not in self.nodes or e.dst not in self.nodes:
                raise RoadGraphError(f"edge {i} references unknown node")
            if not e.weight > 0:
                raise RoadGraphError(f"edge {i} has non-positive weight {e.weight}")
            if tuple(e.polyline[0]) != tuple(self.nodes[e.src]) or tuple(e.polyline[-1]) != tuple(self.nodes[e.dst]):
                raise RoadGraphError(f"edge {i} polyline endpoints do not match its nodes")
            gc = polyline_great_circle_length(e.polyline, self.origin)
            if abs(gc - e.weight) > rel_tol * gc:
                raise RoadGraphError(f"edge {i} weight {e.weight} != great-circle length {gc}")


def segments_of(graph: RoadGraph, edge_ids: Iterable[int]) -> np.ndarray:
    rows = []
    for i in edge_ids:
        pl = graph.edges[i].polyline
        for (x0, y0), (x1, y1) in zip(pl[:-1], pl[1:]):
            rows.append((x0, y0, x1, y1))
    if not rows:
        return np.zeros((0, 4))
    return np.asarray(rows, dtype=np.float64)


def make_edge(src: int, dst: int, polyline: Sequence[tuple[float, float]], origin: GeoPoint) -> Edge:
    pl = tuple((float(x), float(y)) for x, y in polyline)
    return Edge(src, dst, polyline_great_circle_length(pl, origin), pl)


# --------------------------------------------------------------------------
# OSM subset

_TRUTHY = {"yes", "true", "1"}


def parse_osm(document: str, origin: GeoPoint) -> RoadGraph:
    """Build a graph from the node/way/nd/oneway subset of an OSM XML document.

    Ways are split at shared nodes so that graph vertices are junctions and
    way endpoints; intermediate shape nodes become polyline vertices.
    """
    try:
        root = ET.fromstring(document)
    except ET.ParseError as exc:
        line, col = exc.position
        raise OsmParseError(f"malformed XML: {exc.msg if hasattr(exc, 'msg') else exc}", line, col) from None

    coords: dict[int, GeoPoint] = {}
    for el in root.iter("node"):
        coords[int(el.get("id"))] = GeoPoint(float(el.get("lat")), float(el.get("lon")))

    ways: list[tuple[list[int], int]] = []  # (refs, direction) direction: 0 both, 1 fwd, -1 rev
    for way in root.iter("way"):
        wid = way.get("id")
        refs: list[int] = []
        for nd in way.iter("nd"):
            ref = int(nd.get("ref"))
            if ref not in coords:
                raise DanglingReferenceError(ref, wid)
            if not refs or refs[-1] != ref:
                refs.append(ref)
        if len(refs) < 2:
            raise DegenerateWayError(f"way {wid} has fewer than 2 distinct node references")
        direction = 0
        for tag in way.iter("tag"):
            if tag.get("k") == "oneway":
                v = (tag.get("v") or "").strip().lower()
                if v in _TRUTHY:
                    direction = 1
                elif v == "-1":
                    direction = -1
        ways.append((refs, direction))

    usage: dict[int, int] = {}
    for refs, _ in ways:
        for r in refs:
            usage[r] = usage.get(r, 0) + 1
    vertices = set()
    for refs, _ in ways:
        vertices.add(refs[0])
        vertices.add(refs[-1])
    vertices |= {r for r, c in usage.items() if c > 1}

    nodes = {r: project(coords[r], origin) for r in sorted(vertices)}
    edges: list[Edge] = []
    for refs, direction in ways:
        start = 0
        for k in range(1, len(refs)):
            if refs[k] not in vertices:
                continue
            piece = refs[start : k + 1]
            pl = tuple(nodes[r] if r in vertices else project(coords[r], origin) for r in piece)
            w = sum(edge_weight(coords[a], coords[b]) for a, b in zip(piece[:-1], piece[1:]))
            if direction >= 0:
                edges.append(Edge(piece[0], piece[-1], w, pl))
            if direction <= 0:
                edges.append(Edge(piece[-1], piece[0], w, pl[::-1]))
            start = k
    return RoadGraph(nodes, tuple(edges), origin)


# --------------------------------------------------------------------------
# native JSON-lines format

GRAPH_FORMAT = "topo-nav-graph"


def dumps_graph(graph: RoadGraph) -> str:
    lines = [json.dumps({"format": GRAPH_FORMAT, "version": 1,
                         "origin": {"lat": graph.origin.lat, "lon": graph.origin.lon}})]
    for nid in sorted(graph.nodes):
        x, y = graph.nodes[nid]
        lines.append(json.dumps({"node": nid, "x": x, "y": y}))
    for e in graph.edges:
        lines.append(json.dumps({"edge": [e.src, e.dst], "weight": e.weight,
                                 "polyline": [list(p) for p in e.polyline]}))
    return "\n".join(lines) + "\n"


def loads_graph(text: str) -> RoadGraph:
    rows = [json.loads(line) for line in text.splitlines() if line.strip()]
    if not rows or rows[0].get("format") != GRAPH_FORMAT:
        raise RoadGraphError("not a topo-nav graph document")
    o = rows[0]["origin"]
    origin = GeoPoint(o["lat"], o["lon"])
    nodes: dict[int, tuple[float, float]] = {}
    edges: list[Edge] = []
    for r in rows[1:]:
        if "node" in r:
            nodes[int(r["node"])] = (float(r["x"]), float(r["y"]))
        elif "edge" in r:
            src, dst = r["edge"]
            edges.append(Edge(int(src), int(dst), float(r["weight"]),
                              tuple((float(x), float(y)) for x, y in r["polyline"])))
        else:
            raise RoadGraphError(f"unrecognised graph record: {sorted(r)}")
    return RoadGraph(nodes, tuple(edges), origin)


# --------------------------------------------------------------------------
# synthetic worlds

@dataclass(frozen=True)
class WorldSpec:
    kind: str = "grid"
    extents: float = 200.0
    block_size: float = 50.0
    seed: int = 0

    def __post_init__(self):
        if not self.block_size > 0:
            raise ConfigurationError("block_size must be > 0")
        if not self.extents >= self.block_size:
            raise ConfigurationError("extents must be >= block_size")


def _two_way(nodes, pairs, origin):
    edges = []
    for a, b in pairs:
        edges.append(make_edge(a, b, [nodes[a], nodes[b]], origin))
        edges.append(make_edge(b, a, [nodes[b], nodes[a]], origin))
    return edges


def _grid(n: int, block: float, jitter: float = 0.0, rng=None):
    half = (n - 1) * block / 2.0
    nodes = {}
    for j in range(n):
        for i in range(n):
            x, y = i * block - half, j * block - half
            if jitter:
                x += rng.uniform(-jitter, jitter)
                y += rng.uniform(-jitter, jitter)
            nodes[j * n + i] = (round(x, 6), round(y, 6))
    pairs = []
    for j in range(n):
        for i in range(n):
            nid = j * n + i
            if i + 1 < n:
                pairs.append((nid, nid + 1))
            if j + 1 < n:
                pairs.append((nid, nid + n))
    return nodes, pairs


def _connected(nodes, pairs) -> bool:
    adj = {n: set() for n in nodes}
    for a, b in pairs:
        adj[a].add(b)
        adj[b].add(a)
    start = next(iter(nodes))
    seen = {start}
    stack = [start]
    while stack:
        for m in adj[stack.pop()]:
            if m not in seen:
                seen.add(m)
                stack.append(m)
    return len(seen) == len(nodes)


def build_world(spec: WorldSpec) -> RoadGraph:
    """Procedural road network of the requested topology.

    grid: ``n x n`` lattice, ``n = extents / block_size + 1``, two-way streets.
    four-way / t-junction: a centre junction with arms of length ``extents / 2``.
    fork: a stem splitting into two branches 30 degrees either side.
    roundabout: one-way counter-clockwise ring of radius ``block_size / 2``
    with four two-way radial approaches reaching ``extents / 2``.
    composite: jittered grid with seeded street removals (kept connected).
    """
    origin = GeoPoint(0.0, 0.0)
    half = spec.extents / 2.0
    if spec.kind == "grid":
        n = int(round(spec.extents / spec.block_size)) + 1
        nodes, pairs = _grid(n, spec.block_size)
        edges = _two_way(nodes, pairs, origin)
    elif spec.kind == "four-way":
        nodes = {0: (0.0, 0.0), 1: (0.0, half), 2: (half, 0.0), 3: (0.0, -half), 4: (-half, 0.0)}
        edges = _two_way(nodes, [(0, 1), (0, 2), (0, 3), (0, 4)], origin)
    elif spec.kind == "t-junction":
        nodes = {0: (0.0, 0.0), 1: (half, 0.0), 2: (0.0, -half), 3: (-half, 0.0)}
        edges = _two_way(nodes, [(0, 1), (0, 2), (0, 3)], origin)
    elif spec.kind == "fork":
        a = math.radians(30.0)
        nodes = {0: (0.0, 0.0), 1: (0.0, -half),
                 2: (round(-half * math.sin(a), 6), round(half * math.cos(a), 6)),
                 3: (round(half * math.sin(a), 6), round(half * math.cos(a), 6))}
        edges = _two_way(nodes, [(1, 0), (0, 2), (0, 3)], origin)
    elif spec.kind == "roundabout":
        r = spec.block_size / 2.0
        if half <= r:
            raise ConfigurationError("roundabout needs extents / 2 > block_size / 2")
        # ring nodes at S, E, N, W; counter-clockwise order
        angles = [-math.pi / 2, 0.0, math.pi / 2, math.pi]
        nodes = {}
        for k, t in enumerate(angles):
            nodes[k] = (round(r * math.cos(t), 6), round(r * math.sin(t), 6))
            nodes[4 + k] = (round(half * math.cos(t), 6), round(half * math.sin(t), 6))
        edges = []
        per_quarter = 8
        for k in range(4):
            t0 = angles[k]
            pl = [nodes[k]]
            for m in range(1, per_quarter):
                t = t0 + (math.pi / 2) * m / per_quarter
                pl.append((r * math.cos(t), r * math.sin(t)))
            pl.append(nodes[(k + 1) % 4])
            edges.append(make_edge(k, (k + 1) % 4, pl, origin))
        edges += _two_way(nodes, [(4 + k, k) for k in range(4)], origin)
    elif spec.kind == "composite":
        rng = np.random.default_rng(spec.seed)
        n = int(round(spec.extents / spec.block_size)) + 1
        nodes, pairs = _grid(n, spec.block_size, jitter=0.15 * spec.block_size, rng=rng)
        order = rng.permutation(len(pairs))
        kept = list(pairs)
        for idx in order:
            if rng.random() >= 0.2:
                continue
            trial = [p for p in kept if p != pairs[idx]]
            if _connected(nodes, trial):
                kept = trial
        edges = _two_way(nodes, kept, origin)
    else:
        raise ConfigurationError(f"unsupported world kind {spec.kind!r}; expected one of {WORLD_KINDS}")
    return RoadGraph(dict(sorted(nodes.items())), tuple(edges), origin)


# --------------------------------------------------------------------------
# routing

def shortest_distances(graph: RoadGraph, src: int) -> tuple[dict[int, float], dict[int, int]]:
    """Dijkstra from ``src``; returns distances and the predecessor edge per node.

    Equal-distance frontier entries are expanded lowest node id first and a
    node keeps the first predecessor that reached it, so results are
    deterministic.
    """
    dist = {src: 0.0}
    pred: dict[int, int] = {}
    done: set[int] = set()
    heap = [(0.0, src)]
    while heap:
        d, u = heapq.heappop(heap)
        if u in done:
            continue
        done.add(u)
        for ei in graph.out_edges[u]:
            e = graph.edges[ei]
            nd = d + e.weight
            if e.dst not in dist or nd < dist[e.dst]:
                dist[e.dst] = nd
                pred[e.dst] = ei
                heapq.heappush(heap, (nd, e.dst))
    return dist, pred


def shortest_route(graph: RoadGraph, src: int, dst: int) -> list[int]:
    """Minimum-weight directed path as a list of edge indices."""
    for n in (src, dst):
        if n not in graph.nodes:
            raise RoadGraphError(f"unknown node id {n}")
    if src == dst:
        return []
    dist, pred = shortest_distances(graph, src)
    if dst not in dist:
        raise NoRouteError(f"no route from {src} to {dst}")
    route = []
    n = dst
    while n != src:
        ei = pred[n]
        route.append(ei)
        n = graph.edges[ei].src
    return route[::-1]


def route_weight(graph: RoadGraph, route: Sequence[int]) -> float:
    return float(sum(graph.edges[i].weight for i in route))


def route_nodes(graph: RoadGraph, route: Sequence[int]) -> list[int]:
    if not route:
        return []
    return [graph.edges[route[0]].src] + [graph.edges[i].dst for i in route]


def route_polyline(graph: RoadGraph, route: Sequence[int]) -> np.ndarray:
    """Concatenated planar polyline of a head-to-tail route, ``(P, 2)``."""
    pts: list[tuple[float, float]] = []
    for i in route:
        pl = graph.edges[i].polyline
        pts.extend(pl if not pts else pl[1:])
    return np.asarray(pts, dtype=np.float64).reshape(-1, 2)


def random_route(graph: RoadGraph, rng: np.random.Generator, min_length: float,
                 start: int | None = None, max_edges: int = 200) -> list[int]:
    """Random walk without U-turns until ``min_length`` metres or a dead end."""
    nodes = sorted(graph.nodes)
    node = int(rng.choice(nodes)) if start is None else start
    route: list[int] = []
    length = 0.0
    prev_src = None
    while length < min_length and len(route) < max_edges:
        choices = [ei for ei in graph.out_edges[node] if graph.edges[ei].dst != prev_src]
        if not choices:
            break
        ei = int(choices[rng.integers(len(choices))])
        route.append(ei)
        length += graph.edges[ei].weight
        prev_src = node
        node = graph.edges[ei].dst
    return route
