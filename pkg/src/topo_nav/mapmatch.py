"""Offline hidden-Markov map matching of noisy position fixes to road edges.

States are candidate edges within a search radius of each fix.  The emission
score is Gaussian in the perpendicular distance from the fix to the edge; the
transition score between consecutive candidates is

    -beta * |route - straight| / straight

where ``straight`` is the distance between the two fixes and ``route`` the
driving distance between the two projected positions.  Moving backwards along
the same edge counts as negative driving distance, which lets a noisy fix
slip behind its predecessor while still favouring the direction of travel.
The most likely candidate sequence is found with a log-domain Viterbi pass.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import kernels
from .road_graph import RoadGraph, shortest_distances, shortest_route

_LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)


class NoCandidateError(ValueError):
    def __init__(self, index: int, radius: float):
        super().__init__(f"trace sample {index} has no edge within {radius} m")
        self.index = index


class BrokenRouteError(ValueError):
    def __init__(self, position: int, a: int, b: int):
        super().__init__(f"edges {a} and {b} at positions {position}/{position + 1} are not head-to-tail connected")
        self.position = position


@dataclass(frozen=True)
class MatchConfig:
    sigma_emit: float = 4.07
    beta: float = 3.0
    radius: float = 30.0
    max_detour: float = 4.0      # route distances above this multiple of the straight distance are pruned
    min_straight: float = 1.0    # floor on the straight-line distance between fixes (m)

    def __post_init__(self):
        for name in ("sigma_emit", "beta", "radius", "max_detour", "min_straight"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be > 0")


@dataclass
class Candidates:
    """Candidate edges of one fix, sorted by edge id."""

    edges: np.ndarray      # (C,) edge ids
    distance: np.ndarray   # (C,) perpendicular distance (m)
    offset: np.ndarray     # (C,) arc length of the projection along the edge (m)
    log_emission: np.ndarray


@dataclass
class MatchResult:
    edges: list[int]
    candidates: list[Candidates] = field(repr=False)
    score: float = 0.0

    def to_json(self) -> str:
        return json.dumps({"edges": self.edges, "score": self.score}, sort_keys=True)

    def candidates_json(self) -> str:
        doc = [{"sample": t, "candidates": [
            {"edge": int(e), "distance": float(d), "offset": float(o), "log_emission": float(l)}
            for e, d, o, l in zip(c.edges, c.distance, c.offset, c.log_emission)]}
            for t, c in enumerate(self.candidates)]
        return json.dumps(doc, sort_keys=True)


def _edge_lengths(graph: RoadGraph) -> tuple[np.ndarray, np.ndarray]:
    """Planar length of every edge and the arc length at the start of every segment."""
    segs = graph.segments
    seg_len = np.hypot(segs[:, 2] - segs[:, 0], segs[:, 3] - segs[:, 1])
    owner = graph.segment_edge
    lengths = np.bincount(owner, weights=seg_len, minlength=len(graph.edges))
    start = np.zeros(len(seg_len))
    for i in range(1, len(seg_len)):
        if owner[i] == owner[i - 1]:
            start[i] = start[i - 1] + seg_len[i - 1]
    return lengths, start


def find_candidates(graph: RoadGraph, points: np.ndarray, cfg: MatchConfig) -> list[Candidates]:
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    segs = graph.segments
    owner = graph.segment_edge
    _, seg_start = _edge_lengths(graph)
    seg_len = np.hypot(segs[:, 2] - segs[:, 0], segs[:, 3] - segs[:, 1])
    dist, frac = kernels.point_segment_distance(pts, segs)
    n_edges = len(graph.edges)
    out = []
    for t in range(pts.shape[0]):
        best = np.full(n_edges, np.inf)
        off = np.zeros(n_edges)
        d = dist[t]
        # first segment wins on equal distance
        order = np.lexsort((np.arange(len(d)), d))[::-1]
        best[owner[order]] = d[order]
        off[owner[order]] = seg_start[order] + frac[t, order] * seg_len[order]
        ids = np.nonzero(best <= cfg.radius)[0]
        if ids.size == 0:
            raise NoCandidateError(t, cfg.radius)
        dd = best[ids]
        log_e = -0.5 * (dd / cfg.sigma_emit) ** 2 - _LOG_SQRT_2PI - math.log(cfg.sigma_emit)
        out.append(Candidates(ids.astype(np.int64), dd, off[ids], log_e))
    return out


class _NodeDistances:
    """Lazily computed shortest driving distances between nodes."""

    def __init__(self, graph: RoadGraph):
        self.graph = graph
        self.cache: dict[int, dict[int, float]] = {}

    def __call__(self, a: int, b: int) -> float:
        if a not in self.cache:
            self.cache[a] = shortest_distances(self.graph, a)[0]
        return self.cache[a].get(b, math.inf)


def route_distance_matrix(graph: RoadGraph, a: Candidates, b: Candidates, lengths: np.ndarray,
                          node_dist: _NodeDistances | None = None) -> np.ndarray:
    """Signed driving distance from every candidate of ``a`` to every candidate of ``b``."""
    node_dist = node_dist or _NodeDistances(graph)
    out = np.empty((a.edges.size, b.edges.size))
    for i, (ea, oa) in enumerate(zip(a.edges, a.offset)):
        src_end = graph.edges[ea].dst
        for j, (eb, ob) in enumerate(zip(b.edges, b.offset)):
            if ea == eb:
                out[i, j] = ob - oa  # negative when the fix slipped backwards
            else:
                out[i, j] = (lengths[ea] - oa) + node_dist(src_end, graph.edges[eb].src) + ob
    return out


def transition_scores(route: np.ndarray, straight: float, cfg: MatchConfig) -> np.ndarray:
    d = max(straight, cfg.min_straight)
    score = -cfg.beta * np.abs(route - d) / d
    pruned = np.where(np.abs(route) > cfg.max_detour * d, -np.inf, score)
    # keep the chain alive when every pair is an implausible detour
    return pruned if np.isfinite(pruned).any() else score


def viterbi(log_emission: Sequence[np.ndarray], log_transition: Sequence[np.ndarray]) -> tuple[list[int], float]:
    """Most likely state index per step.

    ``log_transition[t]`` scores moving from the states of step ``t`` to those
    of step ``t + 1``.  Ties go to the lowest state index.
    """
    delta = np.asarray(log_emission[0], dtype=np.float64)
    back = []
    for t in range(1, len(log_emission)):
        cand = delta[:, None] + log_transition[t - 1]
        arg = np.argmax(cand, axis=0)
        delta = cand[arg, np.arange(cand.shape[1])] + log_emission[t]
        back.append(arg)
    if not np.isfinite(delta).any():
        raise ArithmeticError("no state sequence has finite probability")
    state = int(np.argmax(delta))
    score = float(delta[state])
    path = [state]
    for arg in reversed(back):
        state = int(arg[state])
        path.append(state)
    return path[::-1], score


def match_trace(graph: RoadGraph, points, cfg: MatchConfig = MatchConfig()) -> MatchResult:
    """Edge id per fix for a sequence of noisy positions (``(N, 2)`` or poses ``(N, 3)``)."""
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[0] == 0:
        raise ValueError("trace must be a non-empty (N, 2) or (N, 3) array")
    pts = pts[:, :2]
    cands = find_candidates(graph, pts, cfg)
    lengths, _ = _edge_lengths(graph)
    node_dist = _NodeDistances(graph)
    trans = []
    for t in range(1, len(cands)):
        straight = float(np.hypot(*(pts[t] - pts[t - 1])))
        route = route_distance_matrix(graph, cands[t - 1], cands[t], lengths, node_dist)
        trans.append(transition_scores(route, straight, cfg))
    path, score = viterbi([c.log_emission for c in cands], trans)
    return MatchResult([int(c.edges[i]) for c, i in zip(cands, path)], cands, score)


def route_edges(graph: RoadGraph, match: Sequence[int]) -> list[int]:
    """Collapse consecutive repeats; consecutive distinct edges must be head-to-tail."""
    out: list[int] = []
    for e in match:
        if not out or out[-1] != e:
            out.append(int(e))
    for k in range(len(out) - 1):
        if graph.edges[out[k]].dst != graph.edges[out[k + 1]].src:
            raise BrokenRouteError(k, out[k], out[k + 1])
    return out


def bridge_route(graph: RoadGraph, match: Sequence[int]) -> list[int]:
    """Like :func:`route_edges`, but gaps are filled with the shortest connecting path."""
    out: list[int] = []
    for e in match:
        e = int(e)
        if out and out[-1] == e:
            continue
        if out and graph.edges[out[-1]].dst != graph.edges[e].src:
            out.extend(shortest_route(graph, graph.edges[out[-1]].dst, graph.edges[e].src))
        out.append(e)
    return out
