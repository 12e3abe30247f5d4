"""Closed-loop driving with the routed (deterministic) steering head."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import kernels
from .mdn import ModelParams, forward
from .render import DEFAULT_RESOLUTION, DEFAULT_SIZE, DEFAULT_STROKE, chart_segments, render_drivable_batch, split_charts
from .road_graph import RoadGraph
from .sim import (CORRIDOR, DT, SPEED, GpsNoise, ObservationNoise, RouteGeometry, simulate_route,
                  start_pose, step_dynamics, synthesize_observations)

BRANCH_PROBE = 15.0   # metres past a junction where the branch choice is checked
BRANCH_TOLERANCE = 3.0
CHART_LEAD = 15.0     # metres of the next chart shown ahead of a chart boundary


@dataclass
class DriveResult:
    completed: bool
    max_deviation: float             # metres from the reference driver's path
    branches_correct: int
    branches_total: int
    poses: np.ndarray = field(repr=False)
    curvature: np.ndarray = field(repr=False)

    @property
    def branch_accuracy(self) -> float:
        return self.branches_correct / self.branches_total if self.branches_total else 1.0

    def metrics(self) -> dict:
        return {"route_completion": self.completed, "max_lateral_deviation_m": self.max_deviation,
                "branches_correct": self.branches_correct, "branches_total": self.branches_total,
                "steps": int(len(self.curvature))}


def junction_probes(graph: RoadGraph, route: Sequence[int], geom: RouteGeometry) -> list[np.ndarray]:
    """Route points a short way past every junction the route passes through."""
    junctions = set(graph.junctions())
    probes = []
    s = 0.0
    scale = geom.length / sum(graph.edges[e].weight for e in route)
    for k, ei in enumerate(route[:-1]):
        s += graph.edges[ei].weight * scale
        if graph.edges[ei].dst in junctions:
            ahead = min(BRANCH_PROBE, 0.5 * graph.edges[route[k + 1]].weight * scale)
            probes.append(geom.point_at(s + ahead))
    return probes


def _path_distance(points: np.ndarray, path: np.ndarray) -> np.ndarray:
    segs = np.hstack([path[:-1], path[1:]])
    return kernels.point_segment_distance(points, segs)[0].min(axis=1)


def drive_route(model: ModelParams, graph: RoadGraph, route: Sequence[int], rng: np.random.Generator,
                noise: ObservationNoise = ObservationNoise(), v: float = SPEED, dt: float = DT,
                corridor: float = CORRIDOR, gps_sigma: float = 0.0, size: int = DEFAULT_SIZE,
                resolution: float = DEFAULT_RESOLUTION, stroke: float = DEFAULT_STROKE,
                max_steps: int = 100_000) -> DriveResult:
    """Drive ``route`` from its start steering only with the routed head.

    Each step renders an observation at the true pose and a routed patch at the
    (optionally GPS-corrupted) believed pose.  The route channel shows the
    chart that contains the vehicle's current route position.
    """
    geom = RouteGeometry(graph, route)
    split = split_charts(graph, route)
    charts = [(c.start, c.end, chart_segments(graph, split, k, CHART_LEAD)) for k, c in enumerate(split)]
    pose = start_pose(geom)
    s = 0.0
    poses, kappas = [], []
    completed = False
    for _ in range(max_steps):
        s, off = geom.project((pose.x, pose.y), s)
        if off > corridor:
            break
        if s >= geom.length - 1e-6:
            completed = True
            break
        pos = geom.route_position_at(s)
        believed = np.asarray([tuple(pose)])
        if gps_sigma > 0:
            believed[0, :2] += rng.normal(0.0, gps_sigma, 2)
        obs = synthesize_observations(graph, np.asarray([tuple(pose)]), noise, rng, size, resolution, stroke)
        drivable = render_drivable_batch(graph, believed, size, resolution, stroke)
        segs = next(c[2] for c in charts if c[0] <= pos < c[1])
        routed = kernels.render_segments(segs, believed, size, resolution, stroke / 2.0)
        kappa = float(forward(model, obs, drivable, routed).det[0])
        poses.append(tuple(pose))
        kappas.append(kappa)
        pose = step_dynamics(pose, kappa, v, dt)
    poses_a = np.asarray(poses).reshape(-1, 3)

    reference = simulate_route(graph, route, v, dt, GpsNoise(0.0, 0.0), np.random.default_rng(0),
                               corridor=math.inf).true[:, :2]
    reference = np.vstack([reference, geom.points[-1:]])
    dev = float(_path_distance(poses_a[:, :2], reference).max()) if len(poses_a) else 0.0

    probes = junction_probes(graph, route, geom)
    correct = 0
    for p in probes:
        if len(poses_a) and np.hypot(*(poses_a[:, :2] - p).T).min() <= BRANCH_TOLERANCE:
            correct += 1
    return DriveResult(completed, dev, correct, len(probes), poses_a, np.asarray(kappas))
