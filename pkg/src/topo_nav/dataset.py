"""Synthetic supervision: (observation, unrouted patch, routed patch, curvature).

Samples are drawn along random routes through procedurally generated worlds.
Three pose sources are mixed:

* on-trace poses from a closed-loop run of the reference driver,
* free poses anywhere on the route,
* free poses concentrated around junction passages, where the executed
  curvature depends on which branch the route takes.

Every pose is displaced by a driver-state perturbation (from a small / medium
/ large mixture) before its target is queried, so the model also sees what
the driver does when it is off the lane centre.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .mdn import Batch
from .render import DEFAULT_RESOLUTION, DEFAULT_SIZE, DEFAULT_STROKE, Pose, render_drivable_batch, split_charts, wrap_angle
from .road_graph import RoadGraph, WorldSpec, build_world, random_route, segments_of
from .sim import (KAPPA_MAX, LOOKAHEAD, OffRouteError, ObservationNoise, RouteGeometry, pursue,
                  simulate_route, synthesize_observations)
from . import kernels

# (weight, lateral sigma m, heading sigma rad)
DEFAULT_PERTURBATION = ((0.5, 0.4, 0.05), (0.3, 1.5, 0.2), (0.2, 4.0, 0.6))


def training_worlds() -> list[WorldSpec]:
    return [
        WorldSpec("four-way", 120.0, 40.0),
        WorldSpec("t-junction", 120.0, 40.0),
        WorldSpec("fork", 120.0, 40.0),
        WorldSpec("roundabout", 120.0, 40.0),
        WorldSpec("grid", 160.0, 80.0),
        WorldSpec("composite", 240.0, 60.0, seed=1),
        WorldSpec("composite", 240.0, 60.0, seed=2),
        WorldSpec("composite", 240.0, 60.0, seed=3),
    ]


def held_out_worlds() -> list[WorldSpec]:
    return [
        WorldSpec("four-way", 140.0, 40.0),
        WorldSpec("composite", 240.0, 60.0, seed=101),
        WorldSpec("composite", 300.0, 60.0, seed=102),
    ]


@dataclass(frozen=True)
class CurriculumConfig:
    n_samples: int = 10_000
    worlds: tuple[WorldSpec, ...] = field(default_factory=lambda: tuple(training_worlds()))
    route_length: float = 250.0
    fractions: tuple[float, float, float] = (0.35, 0.35, 0.30)  # trace, free, junction
    perturbation: tuple[tuple[float, float, float], ...] = DEFAULT_PERTURBATION
    obs_noise: ObservationNoise = ObservationNoise()
    speed: float = 5.0
    dt: float = 0.1
    lookahead: float = LOOKAHEAD
    kappa_max: float = KAPPA_MAX
    size: int = DEFAULT_SIZE
    resolution: float = DEFAULT_RESOLUTION
    stroke: float = DEFAULT_STROKE
    seed: int = 0


@dataclass
class Dataset:
    obs: np.ndarray        # (N, S, S) uint8
    drivable: np.ndarray   # (N, S, S) uint8
    route: np.ndarray      # (N, S, S) uint8
    target: np.ndarray     # (N,)
    poses: np.ndarray      # (N, 3)
    world: np.ndarray      # (N,) index into ``worlds``
    junction_ahead: np.ndarray  # (N,) metres to the next junction on the route (inf if none)
    worlds: list[RoadGraph] = field(default_factory=list)

    def __len__(self):
        return int(self.target.shape[0])

    def batch(self, idx=slice(None)) -> Batch:
        return Batch(self.obs[idx], self.drivable[idx], self.route[idx], self.target[idx])

    def subset(self, idx) -> "Dataset":
        return Dataset(self.obs[idx], self.drivable[idx], self.route[idx], self.target[idx], self.poses[idx],
                       self.world[idx], self.junction_ahead[idx], self.worlds)


def _junction_arclengths(graph: RoadGraph, route: Sequence[int], geom: RouteGeometry) -> np.ndarray:
    """Arc length along the route of every junction node it passes through."""
    junctions = set(graph.junctions())
    marks = []
    s = 0.0
    for ei in route:
        s += graph.edges[ei].weight
        if graph.edges[ei].dst in junctions:
            marks.append(s)
    # edge weights are great-circle lengths; rescale to the planar arc length
    total = sum(graph.edges[ei].weight for ei in route)
    return np.asarray(marks) * (geom.length / total) if marks else np.zeros(0)


def _route_channel(graph, route, chart_bounds, route_pos, poses, size, res, stroke):
    out = np.zeros((len(poses), size, size), dtype=np.uint8)
    for (start, end, segs) in chart_bounds:
        sel = np.nonzero((route_pos >= start) & (route_pos < end))[0]
        if sel.size:
            out[sel] = kernels.render_segments(segs, poses[sel], size, res, stroke / 2.0)
    return out


def render_samples(graph: RoadGraph, route: Sequence[int], poses: np.ndarray, route_pos: np.ndarray,
                   obs_noise: ObservationNoise, rng: np.random.Generator, size: int = DEFAULT_SIZE,
                   resolution: float = DEFAULT_RESOLUTION, stroke: float = DEFAULT_STROKE):
    """Observation, drivable and route-channel rasters for poses along ``route``.

    The route channel shows the chart containing each pose's route position.
    """
    obs = synthesize_observations(graph, poses, obs_noise, rng, size, resolution, stroke)
    drivable = render_drivable_batch(graph, poses, size, resolution, stroke)
    charts = [(c.start, c.end, segments_of(graph, c.edges)) for c in split_charts(graph, route)]
    routed = _route_channel(graph, route, charts, route_pos, poses, size, resolution, stroke)
    return obs, drivable, routed


def _draw_perturbation(rng, mixture, n):
    w = np.asarray([m[0] for m in mixture])
    comp = rng.choice(len(mixture), size=n, p=w / w.sum())
    lat = rng.normal(0.0, 1.0, n) * np.asarray([mixture[c][1] for c in comp])
    head = rng.normal(0.0, 1.0, n) * np.asarray([mixture[c][2] for c in comp])
    return lat, head


def build_curriculum(cfg: CurriculumConfig = CurriculumConfig()) -> Dataset:
    """Generate ``cfg.n_samples`` supervised samples, deterministic in ``cfg.seed``."""
    rng = np.random.default_rng(cfg.seed)
    graphs = [build_world(w) for w in cfg.worlds]
    per_world = np.full(len(graphs), cfg.n_samples // len(graphs))
    per_world[: cfg.n_samples % len(graphs)] += 1

    chunks = []
    for wi, graph in enumerate(graphs):
        need = int(per_world[wi])
        got = 0
        while got < need:
            route = random_route(graph, rng, cfg.route_length)
            if not route:
                continue
            geom = RouteGeometry(graph, route)
            if geom.length < 2 * cfg.lookahead:
                continue
            trace = simulate_route(graph, route, cfg.speed, cfg.dt, rng=rng, lookahead=cfg.lookahead,
                                   kappa_max=cfg.kappa_max)
            jmarks = _junction_arclengths(graph, route, geom)
            usable = geom.length - cfg.lookahead
            n_route = min(need - got, max(8, int(usable / 6.0)))
            src = rng.choice(3, size=n_route, p=np.asarray(cfg.fractions) / sum(cfg.fractions))
            base = np.empty((n_route, 3))
            s_base = np.empty(n_route)
            for k in range(n_route):
                if src[k] == 0 and len(trace) > 0:
                    i = int(rng.integers(len(trace)))
                    base[k] = trace.true[i]
                    s_base[k] = trace.progress[i]
                    if s_base[k] > usable:
                        src[k] = 1
                if src[k] == 2 and jmarks.size:
                    s = float(rng.choice(jmarks) + rng.uniform(-12.0, 4.0))
                    s_base[k] = min(max(s, 0.0), usable)
                elif src[k] != 0 or len(trace) == 0:
                    s_base[k] = rng.uniform(0.0, usable)
                if src[k] != 0:
                    x, y = geom.point_at(s_base[k])
                    base[k] = (x, y, geom.heading_at(s_base[k]))
            lat, head = _draw_perturbation(rng, cfg.perturbation, n_route)
            poses = base.copy()
            poses[:, 0] += lat * np.cos(base[:, 2])
            poses[:, 1] += lat * np.sin(base[:, 2])
            poses[:, 2] = wrap_angle(base[:, 2] + head)
            targets = np.empty(n_route)
            ok = np.ones(n_route, dtype=bool)
            for k in range(n_route):
                try:
                    targets[k], s_k, _ = pursue(geom, Pose(*poses[k]), cfg.lookahead, cfg.kappa_max,
                                                s_hint=s_base[k])
                    s_base[k] = s_k
                except OffRouteError:
                    ok[k] = False
            poses, targets, s_base = poses[ok], targets[ok], s_base[ok]
            if not len(targets):
                continue
            route_pos = np.asarray([geom.route_position_at(s) for s in s_base], dtype=np.int64)
            ahead = np.full(len(s_base), np.inf)
            for k, s in enumerate(s_base):
                later = jmarks[jmarks >= s]
                if later.size:
                    ahead[k] = later.min() - s
            obs, drivable, routed = render_samples(graph, route, poses, route_pos, cfg.obs_noise, rng,
                                                   cfg.size, cfg.resolution, cfg.stroke)
            chunks.append((obs, drivable, routed, targets, poses, np.full(len(targets), wi), ahead))
            got += len(targets)

    cat = [np.concatenate([c[i] for c in chunks]) for i in range(7)]
    return Dataset(*cat, worlds=graphs)
