"""Synthetic sensors and driver for the road world.

The observation raster stands in for camera images: it is rendered from the
*true* pose (with jitter and pixel dropout), never from a believed pose.  The
driver is a pure-pursuit controller whose curvature plays the role of the
recorded human steering.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import kernels
from .render import DEFAULT_RESOLUTION, DEFAULT_SIZE, DEFAULT_STROKE, Pose, render_drivable_batch, wrap_angle
from .road_graph import RoadGraph, route_polyline

KAPPA_MAX = 0.2
LOOKAHEAD = 8.0
SPEED = 5.0
DT = 0.1
CORRIDOR = 10.0


class OffRouteError(RuntimeError):
    pass


class SimulationDivergedError(RuntimeError):
    pass


@dataclass(frozen=True)
class ObservationNoise:
    lateral_sigma: float = 0.5
    heading_sigma: float = 0.05
    dropout: float = 0.1

    def __post_init__(self):
        if self.lateral_sigma < 0 or self.heading_sigma < 0:
            raise ValueError("observation jitter must be >= 0")
        if not 0.0 <= self.dropout <= 1.0:
            raise ValueError("dropout must lie in [0, 1]")


NO_NOISE = ObservationNoise(0.0, 0.0, 0.0)


@dataclass(frozen=True)
class Observation:
    raster: np.ndarray  # (S, S) uint8, ego frame at the true pose


def _jitter_poses(poses: np.ndarray, noise: ObservationNoise, rng: np.random.Generator) -> np.ndarray:
    n = poses.shape[0]
    lat = rng.normal(0.0, 1.0, n) * noise.lateral_sigma
    head = rng.normal(0.0, 1.0, n) * noise.heading_sigma
    out = poses.copy()
    out[:, 0] += lat * np.cos(poses[:, 2])
    out[:, 1] += lat * np.sin(poses[:, 2])
    out[:, 2] = wrap_angle(poses[:, 2] + head)
    return out


def synthesize_observations(graph: RoadGraph, true_poses: np.ndarray, noise: ObservationNoise,
                            rng: np.random.Generator, size: int = DEFAULT_SIZE,
                            resolution: float = DEFAULT_RESOLUTION, stroke: float = DEFAULT_STROKE) -> np.ndarray:
    """Batch version of :func:`synthesize_observation`, ``(N, S, S)`` uint8."""
    poses = np.asarray(true_poses, dtype=np.float64).reshape(-1, 3)
    jittered = _jitter_poses(poses, noise, rng)
    rasters = render_drivable_batch(graph, jittered, size, resolution, stroke)
    keep = rng.random(rasters.shape) >= noise.dropout
    return (rasters * keep).astype(np.uint8)


def synthesize_observation(graph: RoadGraph, true_pose: Pose, noise: ObservationNoise,
                           rng: np.random.Generator, size: int = DEFAULT_SIZE,
                           resolution: float = DEFAULT_RESOLUTION, stroke: float = DEFAULT_STROKE) -> Observation:
    raster = synthesize_observations(graph, np.asarray([tuple(true_pose)]), noise, rng, size, resolution, stroke)[0]
    return Observation(raster)


# --------------------------------------------------------------------------
# route geometry and the pure-pursuit driver

class RouteGeometry:
    """Arc-length parameterisation of a route polyline."""

    def __init__(self, graph: RoadGraph, route: Sequence[int]):
        self.route = list(route)
        self.points = route_polyline(graph, route)
        if len(self.points) < 2:
            raise ValueError("route must contain at least one edge")
        d = np.diff(self.points, axis=0)
        self.seg_len = np.hypot(d[:, 0], d[:, 1])
        self.cum = np.concatenate([[0.0], np.cumsum(self.seg_len)])
        self.length = float(self.cum[-1])
        self.segs = np.hstack([self.points[:-1], self.points[1:]])
        owner = []
        for k, ei in enumerate(self.route):
            owner += [k] * (len(graph.edges[ei].polyline) - 1)
        self.seg_route_pos = np.asarray(owner, dtype=np.int64)

    def point_at(self, s: float) -> np.ndarray:
        s = min(max(s, 0.0), self.length)
        k = int(np.searchsorted(self.cum, s, side="right") - 1)
        k = min(max(k, 0), len(self.seg_len) - 1)
        t = (s - self.cum[k]) / self.seg_len[k] if self.seg_len[k] > 0 else 0.0
        return self.points[k] + t * (self.points[k + 1] - self.points[k])

    def heading_at(self, s: float) -> float:
        """Pose heading (0 = +y, CCW) of the segment containing ``s``."""
        s = min(max(s, 0.0), self.length)
        k = int(np.searchsorted(self.cum, s, side="right") - 1)
        k = min(max(k, 0), len(self.seg_len) - 1)
        dx, dy = self.points[k + 1] - self.points[k]
        return wrap_angle(math.atan2(-dx, dy))

    def route_position_at(self, s: float) -> int:
        k = int(np.searchsorted(self.cum, min(max(s, 0.0), self.length), side="right") - 1)
        return int(self.seg_route_pos[min(max(k, 0), len(self.seg_len) - 1)])

    def project(self, point, s_hint: float | None = None, back: float = 5.0, ahead: float = 25.0):
        """Closest route point as ``(s, distance)``.

        With ``s_hint`` the search is restricted to ``[s_hint - back, s_hint + ahead]``
        so that routes crossing themselves do not make progress jump.
        """
        p = np.asarray(point, dtype=np.float64).reshape(1, 2)
        if s_hint is None:
            idx = np.arange(len(self.seg_len))
        else:
            lo, hi = s_hint - back, s_hint + ahead
            idx = np.nonzero((self.cum[1:] >= lo) & (self.cum[:-1] <= hi))[0]
            if idx.size == 0:
                idx = np.arange(len(self.seg_len))
        dist, frac = kernels.point_segment_distance(p, self.segs[idx])
        best = int(np.argmin(dist[0]))
        k = int(idx[best])
        return float(self.cum[k] + frac[0, best] * self.seg_len[k]), float(dist[0, best])


def pure_pursuit_curvature(bearing: float, lookahead: float, kappa_max: float = KAPPA_MAX) -> float:
    """Pure-pursuit law ``2 sin(bearing) / lookahead``, clamped to ``+-kappa_max``."""
    k = 2.0 * math.sin(bearing) / lookahead
    return min(max(k, -kappa_max), kappa_max)


def pursue(geom: RouteGeometry, pose: Pose, lookahead: float = LOOKAHEAD, kappa_max: float = KAPPA_MAX,
           s_hint: float | None = None, max_offset: float = CORRIDOR) -> tuple[float, float, float]:
    """Pure-pursuit step on a prepared route: ``(curvature, progress s, offset)``."""
    s, dist = geom.project((pose[0], pose[1]), s_hint)
    if dist > max_offset:
        raise OffRouteError(f"pose is {dist:.2f} m from the route (limit {max_offset} m)")
    tx, ty = geom.point_at(s + lookahead)
    dx, dy = tx - pose[0], ty - pose[1]
    hx, hy = -math.sin(pose[2]), math.cos(pose[2])
    bearing = math.atan2(hx * dy - hy * dx, hx * dx + hy * dy)
    return pure_pursuit_curvature(bearing, lookahead, kappa_max), s, dist


def oracle_steering(graph: RoadGraph, route: Sequence[int], true_pose: Pose, lookahead: float = LOOKAHEAD,
                    kappa_max: float = KAPPA_MAX, s_hint: float | None = None) -> float:
    """Curvature the reference driver would execute at ``true_pose``."""
    return pursue(RouteGeometry(graph, route), true_pose, lookahead, kappa_max, s_hint)[0]


def step_dynamics(pose: Pose, curvature: float, v: float, dt: float) -> Pose:
    """Unicycle step with midpoint heading; yaw rate is ``curvature * v``."""
    if not (v > 0 and dt > 0):
        raise ValueError("v and dt must be > 0")
    dyaw = curvature * v * dt
    mid = pose[2] + 0.5 * dyaw
    return Pose(pose[0] - v * dt * math.sin(mid), pose[1] + v * dt * math.cos(mid), wrap_angle(pose[2] + dyaw))


def corrupt_gps(pose: Pose, sigma_xy: float, sigma_alpha: float, rng: np.random.Generator) -> Pose:
    if sigma_xy < 0 or sigma_alpha < 0:
        raise ValueError("noise scales must be >= 0")
    n = rng.normal(0.0, 1.0, 3)
    return Pose(pose[0] + sigma_xy * n[0], pose[1] + sigma_xy * n[1], wrap_angle(pose[2] + sigma_alpha * n[2]))


# --------------------------------------------------------------------------
# traces

TRACE_COLUMNS = ("t", "x", "y", "alpha", "gx", "gy", "galpha", "gamma", "v", "theta_s")


@dataclass
class Trace:
    t: np.ndarray
    true: np.ndarray    # (N, 3)
    noisy: np.ndarray   # (N, 3) GPS poses
    gamma: np.ndarray
    v: np.ndarray
    theta_s: np.ndarray
    route_pos: np.ndarray | None = field(default=None, compare=False)  # index into the route per sample
    progress: np.ndarray | None = field(default=None, compare=False)

    def __len__(self):
        return len(self.t)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(TRACE_COLUMNS)
        for k in range(len(self.t)):
            row = (self.t[k], *self.true[k], *self.noisy[k], self.gamma[k], self.v[k], self.theta_s[k])
            w.writerow([repr(float(x)) for x in row])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "Trace":
        rows = list(csv.reader(io.StringIO(text)))
        if not rows or tuple(rows[0]) != TRACE_COLUMNS:
            raise ValueError(f"trace CSV header must be {','.join(TRACE_COLUMNS)}")
        a = np.asarray([[float(x) for x in r] for r in rows[1:]], dtype=np.float64).reshape(-1, len(TRACE_COLUMNS))
        return cls(a[:, 0], a[:, 1:4], a[:, 4:7], a[:, 7], a[:, 8], a[:, 9])


@dataclass(frozen=True)
class GpsNoise:
    sigma_xy: float = 2.0
    sigma_alpha: float = 0.0


def start_pose(geom: RouteGeometry) -> Pose:
    x, y = geom.points[0]
    return Pose(float(x), float(y), geom.heading_at(0.0))


def simulate_route(graph: RoadGraph, route: Sequence[int], v: float = SPEED, dt: float = DT,
                   gps: GpsNoise = GpsNoise(), rng: np.random.Generator | None = None,
                   lookahead: float = LOOKAHEAD, kappa_max: float = KAPPA_MAX,
                   corridor: float = CORRIDOR, max_steps: int = 100_000) -> Trace:
    """Closed-loop pure-pursuit drive from the route start to its end."""
    if not (v > 0 and dt > 0):
        raise ValueError("v and dt must be > 0")
    rng = rng if rng is not None else np.random.default_rng(0)
    geom = RouteGeometry(graph, route)
    pose = start_pose(geom)
    s = 0.0
    ts, trues, noisys, kappas, pos, prog = [], [], [], [], [], []
    for k in range(max_steps):
        try:
            kappa, s, _ = pursue(geom, pose, lookahead, kappa_max, s_hint=s, max_offset=corridor)
        except OffRouteError as exc:
            raise SimulationDivergedError(f"vehicle left the {corridor} m corridor at t={k * dt:.1f}s") from exc
        if s >= geom.length - 1e-6:
            break
        ts.append(k * dt)
        trues.append(tuple(pose))
        noisys.append(tuple(corrupt_gps(pose, gps.sigma_xy, gps.sigma_alpha, rng)))
        kappas.append(kappa)
        pos.append(geom.route_position_at(s))
        prog.append(s)
        pose = step_dynamics(pose, kappa, v, dt)
    kap = np.asarray(kappas, dtype=np.float64)
    return Trace(np.asarray(ts), np.asarray(trues).reshape(-1, 3), np.asarray(noisys).reshape(-1, 3),
                 kap * v, np.full(len(kap), float(v)), kap, np.asarray(pos, dtype=np.int64), np.asarray(prog))
