"""Experiment runners.

Every runner takes a validated config and returns a :class:`RunOutput`
holding text artifacts, metrics and figure requests.  Nothing touches the
file system until the CLI writes the whole set.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .. import __version__
from ..belief import (belief_stats, coverage_from_mixtures, hypothesis_mixtures, interval_union_coverage, make_prior,
                      place_recognition, posterior_from_mixtures, row_argmax, stats_reduction)
from ..dataset import CurriculumConfig, build_curriculum
from ..drive import drive_route, junction_probes
from ..mapmatch import MatchConfig, match_trace
from ..mdn import ModelParams, checkpoint_dumps, load_checkpoint, predict_mixtures
from ..render import Pose, render_patch
from ..road_graph import RoadGraph, WorldSpec, build_world, dumps_graph, random_route
from ..sim import GpsNoise, RouteGeometry, corrupt_gps, pursue, simulate_route, synthesize_observation
from ..train import train
from .config import ExperimentConfig, MissingArtifactError
from .io import csv_text, json_text
from .report import Figure

STATS = ("spatial_variance", "angular_variance", "total_variance", "entropy")


@dataclass
class RunOutput:
    metrics: dict
    files: dict[str, str] = field(default_factory=dict)
    figures: list[Figure] = field(default_factory=list)
    figure_data: dict = field(default_factory=dict)


def _rng(cfg: ExperimentConfig, *tags: int) -> np.random.Generator:
    return np.random.default_rng([cfg.seed, *tags])


def load_model(cfg: ExperimentConfig, base: Path = Path(".")) -> ModelParams:
    if cfg.checkpoint is None:
        raise MissingArtifactError(f"experiment {cfg.experiment!r} needs a trained checkpoint; set 'checkpoint'")
    path = base / cfg.checkpoint
    if not path.is_file():
        raise MissingArtifactError(f"checkpoint {path} not found")
    return load_checkpoint(path)


def _route_with_junctions(graph: RoadGraph, rng: np.random.Generator, length: float, min_junctions: int,
                          attempts: int = 200) -> list[int]:
    """Random route passing at least ``min_junctions`` junctions, else the best of ``attempts`` draws."""
    best, best_n = None, -1
    for _ in range(attempts):
        route = random_route(graph, rng, length)
        if not route:
            continue
        n = len(junction_probes(graph, route, RouteGeometry(graph, route)))
        if n > best_n:
            best, best_n = route, n
        if n >= min_junctions:
            break
    if best is None:
        raise ValueError("world has no drivable route")
    return best


# --------------------------------------------------------------------------
# utilities

def run_world(cfg: ExperimentConfig, base: Path) -> RunOutput:
    g = cfg.world.graph(base)
    total = sum(e.weight for e in g.edges)
    metrics = {"nodes": len(g.nodes), "edges": len(g.edges), "junctions": len(g.junctions()),
               "total_length_m": total}
    return RunOutput(metrics, {"world.json": dumps_graph(g)})


def run_simulate(cfg: ExperimentConfig, base: Path) -> RunOutput:
    g = cfg.world.graph(base)
    rng = _rng(cfg, 1)
    route = _route_with_junctions(g, rng, cfg.sim.route_length, cfg.drive.min_junctions)
    trace = simulate_route(g, route, cfg.sim.speed, cfg.sim.dt, cfg.sim.gps_noise(), rng,
                           lookahead=cfg.sim.lookahead, kappa_max=cfg.sim.kappa_max)
    metrics = {"samples": len(trace), "route_edges": len(route),
               "route_length_m": RouteGeometry(g, route).length}
    return RunOutput(metrics, {"trace.csv": trace.to_csv(), "route.json": json_text({"route": route})})


def run_train(cfg: ExperimentConfig, base: Path) -> RunOutput:
    data = build_curriculum(cfg.train.curriculum(cfg.sim, cfg.seed, cfg.model.size))
    model = ModelParams.init(cfg.model_config_obj(), _rng(cfg, 2))
    model, history = train(model, data, cfg.train.train_config(cfg.seed))
    rows = list(zip(history.epoch, history.loss))
    metrics = {"samples": len(data), "epochs": cfg.train.epochs, "parameters": model.n_parameters(),
               "initial_loss": history.loss[0] if history.loss else None,
               "final_loss": history.loss[-1] if history.loss else None}
    out = RunOutput(metrics, {
        "checkpoint.json": checkpoint_dumps(model, {"seed": cfg.seed, "topo_nav": __version__}),
        "history.csv": csv_text(("epoch", "loss"), rows),
    })
    if len(rows) > 0:
        out.figures.append(Figure("loss", "line", ("loss",), "Training loss", x="epoch", xlabel="epoch",
                                  ylabel="loss"))
        out.figure_data = {"epoch": history.epoch, "loss": history.loss}
    return out


# --------------------------------------------------------------------------
# steering calibration

def resample_targets(phi, mu, sigma, rng: np.random.Generator, draws: int) -> np.ndarray:
    """``draws`` steering values per row of a mixture table, shape ``(N, draws)``."""
    n, k = phi.shape
    u = rng.random((n, draws))
    comp = np.minimum((u[..., None] > np.cumsum(phi, axis=1)[:, None, :]).sum(axis=2), k - 1)
    rows = np.arange(n)[:, None]
    return mu[rows, comp] + sigma[rows, comp] * rng.normal(0.0, 1.0, (n, draws))


def run_calibration(cfg: ExperimentConfig, base: Path) -> RunOutput:
    model = load_model(cfg, base)
    c = cfg.calibration
    data = build_curriculum(CurriculumConfig(
        n_samples=c.n_samples, worlds=(cfg.world.spec(),), obs_noise=cfg.sim.obs_noise(), speed=cfg.sim.speed,
        dt=cfg.sim.dt, lookahead=cfg.sim.lookahead, kappa_max=cfg.sim.kappa_max, size=model.config.size,
        seed=cfg.seed))
    phi, mu, sigma = predict_mixtures(model, data.obs, data.drivable)
    draws = resample_targets(phi, mu, sigma, _rng(cfg, 3), c.resamples)
    rows = []
    series = {"z": [], "fraction": [], "resampled_fraction": [], "oracle_coverage": [], "gaussian_reference": []}
    for z in c.z_grid:
        frac = float(coverage_from_mixtures(phi, mu, sigma, data.target, z, c.phi_min).mean())
        resampled = float(np.mean([coverage_from_mixtures(phi, mu, sigma, draws[:, d], z, c.phi_min).mean()
                                   for d in range(c.resamples)]))
        oracle = float(np.mean([interval_union_coverage(phi[i], mu[i], sigma[i], z, c.phi_min)
                                for i in range(len(phi))]))
        gauss = math.erf(z / math.sqrt(2.0))
        rows.append((z, frac, resampled, oracle, gauss))
        for key, v in zip(series, rows[-1]):
            series[key].append(v)
    k = phi.shape[1]
    header = ["sample", "target"] + [f"{p}{i}" for p in ("phi", "mu", "sigma") for i in range(k)]
    per_sample = [(i, float(data.target[i]), *map(float, phi[i]), *map(float, mu[i]), *map(float, sigma[i]))
                  for i in range(len(data))]
    metrics = {
        "samples": len(data),
        "z": list(c.z_grid),
        "fraction": series["fraction"],
        "resampled_fraction": series["resampled_fraction"],
        "oracle_coverage": series["oracle_coverage"],
        "max_self_consistency_error": max(abs(a - b) for a, b in zip(series["resampled_fraction"],
                                                                      series["oracle_coverage"])),
        "monotone": all(b >= a for a, b in zip(series["fraction"], series["fraction"][1:])),
    }
    fig = Figure("calibration", "line", ("fraction", "resampled_fraction", "gaussian_reference"),
                 "Steering calibration", x="z", xlabel="z", ylabel="fraction within z sigma")
    return RunOutput(metrics, {
        "calibration.csv": csv_text(("z", "fraction", "resampled_fraction", "oracle_coverage", "gaussian_reference"),
                                    rows),
        "samples.csv": csv_text(header, per_sample),
    }, [fig], series)


# --------------------------------------------------------------------------
# localization

def junction_samples(graph: RoadGraph, cfg: ExperimentConfig, rng: np.random.Generator, n: int,
                     window: float) -> tuple[np.ndarray, np.ndarray]:
    """True poses within ``window`` metres of a junction and the curvature driven there."""
    jxy = np.asarray([graph.nodes[j] for j in graph.junctions()]).reshape(-1, 2)
    if not len(jxy):
        raise ValueError("world has no junctions to localize around")
    poses, kappas = [], []
    for _ in range(10_000):
        if len(poses) >= 4 * n:
            break
        route = random_route(graph, rng, cfg.sim.route_length)
        if not route:
            continue
        tr = simulate_route(graph, route, cfg.sim.speed, cfg.sim.dt, GpsNoise(0.0, 0.0), rng,
                            lookahead=cfg.sim.lookahead, kappa_max=cfg.sim.kappa_max)
        d = np.hypot(tr.true[:, None, 0] - jxy[None, :, 0], tr.true[:, None, 1] - jxy[None, :, 1]).min(axis=1)
        near = np.nonzero(d <= window)[0]
        poses += [tr.true[i] for i in near]
        kappas += [tr.theta_s[i] for i in near]
    if len(poses) < n:
        raise ValueError(f"only {len(poses)} junction-adjacent poses found, need {n}")
    pick = np.sort(rng.choice(len(poses), n, replace=False))
    return np.asarray(poses)[pick], np.asarray(kappas)[pick]


def run_localization(cfg: ExperimentConfig, base: Path) -> RunOutput:
    model = load_model(cfg, base)
    loc = cfg.localization
    graph = cfg.world.graph(base)
    rng = _rng(cfg, 4)
    poses, kappas = junction_samples(graph, cfg, rng, loc.n_samples, loc.junction_window)
    levels = [(sx, sa) for sx in loc.sigma_xy_levels for sa in loc.sigma_alpha_levels]
    size = model.config.size
    rows = []
    sums = np.zeros((len(levels), len(STATS)))
    degenerate = 0
    for i, (pose, kappa) in enumerate(zip(poses, kappas)):
        true = Pose(*pose)
        obs = synthesize_observation(graph, true, cfg.sim.obs_noise(), rng, size)
        for li, (sx, sa) in enumerate(levels):
            prior = make_prior(corrupt_gps(true, sx, sa, rng), sx, sa, loc.n_hypotheses, rng)
            phi, mu, sigma = hypothesis_mixtures(model, obs, graph, prior.poses, size)
            post = posterior_from_mixtures(prior, phi, mu, sigma, loc.mode, float(kappa), loc.sigma_meas,
                                           loc.n_steer, model.config.kappa_max, rng)
            degenerate += post.degenerate
            red = stats_reduction(belief_stats(prior), belief_stats(post))
            vals = [red[k] for k in STATS]
            sums[li] += vals
            rows.append((i, sx, sa, *vals))
    means = sums / len(poses)
    labels = [f"{sx:g} m / {sa:g} rad" for sx, sa in levels]
    level_rows = [(sx, sa, *m) for (sx, sa), m in zip(levels, means.tolist())]
    metrics = {
        "samples": len(poses), "mode": loc.mode, "hypotheses": loc.n_hypotheses, "degenerate_updates": degenerate,
        "levels": [{"sigma_xy": sx, "sigma_alpha": sa, **{f"mean_{k}_reduction": float(v) for k, v in zip(STATS, m)}}
                   for (sx, sa), m in zip(levels, means)],
        "all_reductions_positive": bool((means > 0).all()),
    }
    data = {"level": labels, **{k: means[:, j].tolist() for j, k in enumerate(STATS)}}
    figs = [Figure(f"reduction_{k}", "bars", (k,), f"Mean {k.replace('_', ' ')} reduction", x="level",
                   xlabel="prior sigma", ylabel="prior minus posterior") for k in STATS]
    header = ("sample", "sigma_xy", "sigma_alpha") + tuple(f"{k}_reduction" for k in STATS)
    return RunOutput(metrics, {
        "samples.csv": csv_text(header, rows),
        "levels.csv": csv_text(("sigma_xy", "sigma_alpha") + tuple(f"mean_{k}_reduction" for k in STATS),
                               level_rows),
    }, figs, data)


# --------------------------------------------------------------------------
# place recognition

@dataclass(frozen=True)
class Location:
    name: str
    world: WorldSpec
    approach: tuple[int, int, int]   # from node, junction node, exit node
    before: float                    # metres before the junction


# Executed steering differs between the five places, so a correct map patch
# is the only one that explains each observation's curvature well.
CONFUSION_LOCATIONS = (
    Location("straight", WorldSpec("four-way", 140.0, 40.0), (3, 0, 1), 45.0),
    Location("left-turn", WorldSpec("t-junction", 120.0, 40.0), (1, 0, 2), 3.0),
    Location("right-turn", WorldSpec("t-junction", 120.0, 40.0), (3, 0, 2), 3.0),
    Location("four-way", WorldSpec("four-way", 140.0, 40.0), (3, 0, 2), 6.0),
    Location("roundabout", WorldSpec("roundabout", 120.0, 40.0), (4, 0, 1), 4.0),
)


def place(loc: Location, lookahead: float, kappa_max: float) -> tuple[RoadGraph, Pose, float]:
    """Graph, pose and reference curvature of a location."""
    g = build_world(loc.world)
    a, j, b = loc.approach

    def edge(u, v):
        return next(i for i, e in enumerate(g.edges) if (e.src, e.dst) == (u, v))

    route = [edge(a, j), edge(j, b)]
    geom = RouteGeometry(g, route)
    s = g.edges[route[0]].weight - loc.before
    x, y = geom.point_at(s)
    pose = Pose(float(x), float(y), geom.heading_at(s))
    return g, pose, pursue(geom, pose, lookahead, kappa_max)[0]


def run_confusion(cfg: ExperimentConfig, base: Path) -> RunOutput:
    model = load_model(cfg, base)
    size = model.config.size
    places = [place(loc, cfg.sim.lookahead, cfg.sim.kappa_max) for loc in CONFUSION_LOCATIONS]
    names = [loc.name for loc in CONFUSION_LOCATIONS]
    patches = [render_patch(g, pose, size=size) for g, pose, _ in places]
    n = len(places)
    rows, hits, mean_norm = [], [], np.zeros((n, n))
    for s in range(cfg.confusion.n_seeds):
        rng = _rng(cfg, 5, s)
        obs = [(synthesize_observation(g, pose, cfg.sim.obs_noise(), rng, size), theta) for g, pose, theta in places]
        raw, norm = place_recognition(model, obs, patches)
        am = row_argmax(raw)
        hits.append(int((am == np.arange(n)).sum()))
        mean_norm += norm / cfg.confusion.n_seeds
        rows += [(s, names[i], names[j], float(raw[i, j]), float(norm[i, j])) for i in range(n) for j in range(n)]
    metrics = {"locations": names, "steering": [float(t) for _, _, t in places], "seeds": cfg.confusion.n_seeds,
               "diagonal_hits": hits, "min_diagonal_hits": min(hits),
               "mean_normalized": mean_norm.tolist()}
    fig = Figure("confusion", "heatmap", ("mean_normalized",), "Place recognition", x="locations",
                 xlabel="map patch", ylabel="observation")
    return RunOutput(metrics, {"confusion.csv": csv_text(("seed", "observation", "patch", "raw", "normalized"), rows)},
                     [fig], {"mean_normalized": mean_norm.tolist(), "locations": names})


# --------------------------------------------------------------------------
# map matching

def run_matching(cfg: ExperimentConfig, base: Path) -> RunOutput:
    graph = cfg.world.graph(base)
    m = cfg.matching
    mc = MatchConfig(sigma_emit=m.sigma_emit, beta=m.beta, radius=m.radius)
    rows, acc = [], []
    for si, sigma in enumerate(m.gps_sigmas):
        rng = _rng(cfg, 6, si)
        hit = total = 0
        for r in range(m.n_routes):
            route = _route_with_junctions(graph, rng, cfg.sim.route_length, cfg.drive.min_junctions)
            tr = simulate_route(graph, route, cfg.sim.speed, cfg.sim.dt, GpsNoise(sigma, 0.0), rng,
                                lookahead=cfg.sim.lookahead, kappa_max=cfg.sim.kappa_max)
            matched = np.asarray(match_trace(graph, tr.noisy, mc).edges)
            truth = np.asarray(route)[tr.route_pos]
            ok = int((matched == truth).sum())
            rows.append((sigma, r, len(tr), ok / len(tr)))
            hit += ok
            total += len(tr)
        acc.append(hit / total)
    metrics = {"gps_sigma": list(m.gps_sigmas), "accuracy": acc, "routes": m.n_routes}
    fig = Figure("matching", "line", ("accuracy",), "Map matching accuracy", x="gps_sigma",
                 xlabel="GPS sigma (m)", ylabel="edge accuracy")
    return RunOutput(metrics, {"matching.csv": csv_text(("gps_sigma", "route", "samples", "accuracy"), rows)},
                     [fig], {"gps_sigma": list(m.gps_sigmas), "accuracy": acc})


# --------------------------------------------------------------------------
# closed-loop driving

def run_drive(cfg: ExperimentConfig, base: Path) -> RunOutput:
    model = load_model(cfg, base)
    graph = cfg.world.graph(base)
    rows, results = [], []
    for s in range(cfg.drive.n_seeds):
        rng = _rng(cfg, 7, s)
        route = _route_with_junctions(graph, rng, cfg.sim.route_length, cfg.drive.min_junctions)
        res = drive_route(model, graph, route, rng, cfg.sim.obs_noise(), cfg.sim.speed, cfg.sim.dt,
                          gps_sigma=cfg.drive.gps_sigma, size=model.config.size)
        results.append(res)
        rows.append((s, res.completed, res.max_deviation, res.branches_correct, res.branches_total,
                     len(res.curvature)))
    correct = sum(r.branches_correct for r in results)
    total = sum(r.branches_total for r in results)
    metrics = {
        "route_completion": all(r.completed for r in results),
        "completed_runs": sum(r.completed for r in results),
        "max_lateral_deviation_m": max(r.max_deviation for r in results),
        "branches_correct": correct, "branches_total": total,
        "branch_accuracy": correct / total if total else 1.0,
        "junctions_in_world": len(graph.junctions()),
        "runs": [r.metrics() for r in results],
    }
    fig = Figure("drive", "bars", ("max_deviation",), "Max lateral deviation per run", x="seed",
                 xlabel="seed", ylabel="metres")
    data = {"seed": list(range(len(results))), "max_deviation": [r.max_deviation for r in results]}
    return RunOutput(metrics, {"drive.csv": csv_text(("seed", "completed", "max_deviation_m", "branches_correct",
                                                      "branches_total", "steps"), rows)}, [fig], data)


RUNNERS: dict[str, Callable[[ExperimentConfig, Path], RunOutput]] = {
    "world": run_world, "simulate": run_simulate, "train": run_train, "calibration": run_calibration,
    "localization": run_localization, "confusion": run_confusion, "matching": run_matching, "drive": run_drive,
}
