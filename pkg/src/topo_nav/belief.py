"""Discrete pose beliefs and their reweighting by steering evidence.

A belief is a weighted set of pose hypotheses.  Each hypothesis renders its
own unrouted map patch; the model then gives a steering mixture for the
(shared) observation under that hypothesis, and the hypothesis is reweighted
by how well that mixture explains the steering.

Two update rules are provided:

``observed-steering``
    weight_j ∝ prior_j * ∫ N(θ; θ_meas, σ_meas²) p_j(θ) dθ, with the integral
    taken by trapezoid quadrature on a fixed grid.

``paper-literal``
    Steering values θ_k are drawn from a sampling distribution and every
    hypothesis is scored by p_j(θ_k) / Σ_j' prior_j' p_j'(θ_k), averaged over
    k.  When θ_k are drawn from the prior-weighted marginal itself the
    expectation of that ratio is 1 for every j, so the posterior tends to the
    prior.
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import kernels
from .mdn import ModelParams, gmm_log_density, predict_mixtures
from .render import DEFAULT_RESOLUTION, DEFAULT_SIZE, DEFAULT_STROKE, Pose, render_drivable_batch, wrap_angle
from .road_graph import RoadGraph

MODES = ("observed-steering", "paper-literal")
SIGMA_MEAS = 0.005
N_STEER = 129
PHI_MIN = 0.05
VARIANCE_FLOOR = 1e-12


class DegenerateUpdateError(ArithmeticError):
    """Every hypothesis likelihood underflowed to zero."""


@dataclass(frozen=True)
class PoseBelief:
    poses: np.ndarray    # (N, 3) x, y, alpha
    weights: np.ndarray  # (N,)
    degenerate: bool = False

    def __post_init__(self):
        poses = np.asarray(self.poses, dtype=np.float64).reshape(-1, 3)
        w = np.asarray(self.weights, dtype=np.float64).reshape(-1)
        if poses.shape[0] == 0:
            raise ValueError("a belief needs at least one hypothesis")
        if w.shape[0] != poses.shape[0]:
            raise ValueError("one weight per hypothesis required")
        if (w < 0).any() or not np.isfinite(w).all() or abs(w.sum() - 1.0) > 1e-9:
            raise ValueError("weights must be non-negative and sum to 1")
        object.__setattr__(self, "poses", poses)
        object.__setattr__(self, "weights", w)

    def __len__(self):
        return self.weights.shape[0]

    @property
    def hypotheses(self) -> list[tuple[Pose, float]]:
        return [(Pose(*map(float, p)), float(w)) for p, w in zip(self.poses, self.weights)]

    def with_weights(self, weights, degenerate: bool = False) -> "PoseBelief":
        return PoseBelief(self.poses, weights, degenerate)

    def to_csv(self) -> str:
        buf = io.StringIO()
        out = csv.writer(buf, lineterminator="\n")
        out.writerow(("x", "y", "alpha", "weight"))
        for p, w in zip(self.poses, self.weights):
            out.writerow([repr(float(v)) for v in (*p, w)])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "PoseBelief":
        rows = list(csv.reader(io.StringIO(text)))
        if not rows or tuple(rows[0]) != ("x", "y", "alpha", "weight"):
            raise ValueError("belief CSV header must be x,y,alpha,weight")
        a = np.asarray([[float(v) for v in r] for r in rows[1:]], dtype=np.float64).reshape(-1, 4)
        return cls(a[:, :3], a[:, 3])


@dataclass(frozen=True)
class BeliefStats:
    spatial_variance: float
    angular_variance: float
    total_variance: float
    entropy: float

    def to_dict(self) -> dict:
        return {"spatial_variance": self.spatial_variance, "angular_variance": self.angular_variance,
                "total_variance": self.total_variance, "entropy": self.entropy}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def make_prior(center: Pose, sigma_xy: float, sigma_alpha: float, n: int, rng: np.random.Generator) -> PoseBelief:
    """``n`` hypotheses drawn from a Gaussian about ``center`` with uniform weights."""
    if n < 1:
        raise ValueError("need at least one hypothesis")
    if sigma_xy < 0 or sigma_alpha < 0:
        raise ValueError("prior spreads must be >= 0")
    z = rng.normal(0.0, 1.0, (n, 3))
    poses = np.empty((n, 3))
    poses[:, 0] = center[0] + sigma_xy * z[:, 0]
    poses[:, 1] = center[1] + sigma_xy * z[:, 1]
    poses[:, 2] = wrap_angle(center[2] + sigma_alpha * z[:, 2])
    return PoseBelief(poses, np.full(n, 1.0 / n))


# --------------------------------------------------------------------------
# likelihoods

def hypothesis_mixtures(model: ModelParams, obs, graph: RoadGraph, poses: np.ndarray, size: int = DEFAULT_SIZE,
                        resolution: float = DEFAULT_RESOLUTION, stroke: float = DEFAULT_STROKE):
    """``(phi, mu, sigma)`` for one observation under every hypothesis pose."""
    raster = np.asarray(getattr(obs, "raster", obs))
    patches = render_drivable_batch(graph, np.asarray(poses).reshape(-1, 3), size, resolution, stroke)
    return predict_mixtures(model, raster, patches)


def steering_grid(kappa_max: float, sigma_meas: float, n: int) -> tuple[np.ndarray, np.ndarray]:
    """Quadrature nodes and trapezoid weights covering the curvature range."""
    if n < 2:
        raise ValueError("need at least two quadrature nodes")
    lim = kappa_max + 4.0 * sigma_meas
    grid = np.linspace(-lim, lim, n)
    w = np.full(n, grid[1] - grid[0])
    w[0] *= 0.5
    w[-1] *= 0.5
    return grid, w


def observed_likelihoods(phi, mu, sigma, theta_meas: float, sigma_meas: float = SIGMA_MEAS,
                         n_steer: int = N_STEER, kappa_max: float = 0.2) -> np.ndarray:
    """∫ N(θ; θ_meas, σ_meas²) p_j(θ) dθ for every hypothesis ``j``."""
    if not sigma_meas > 0:
        raise ValueError("sigma_meas must be > 0")
    grid, w = steering_grid(kappa_max, sigma_meas, n_steer)
    z = (grid - theta_meas) / sigma_meas
    meas = np.exp(-0.5 * z * z) / (math.sqrt(2.0 * math.pi) * sigma_meas)
    return kernels.mixture_grid_integral(np.atleast_2d(phi), np.atleast_2d(mu), np.atleast_2d(sigma), grid, w * meas)


def sample_marginal(prior_weights, phi, mu, sigma, n: int, rng: np.random.Generator) -> np.ndarray:
    """Draws from Σ_j prior_j p_j(θ)."""
    phi = np.atleast_2d(phi)
    j = rng.choice(phi.shape[0], size=n, p=prior_weights)
    u = rng.random(n)
    cum = np.cumsum(phi[j], axis=1)
    i = np.minimum((u[:, None] > cum).sum(axis=1), phi.shape[1] - 1)
    return np.atleast_2d(mu)[j, i] + np.atleast_2d(sigma)[j, i] * rng.normal(0.0, 1.0, n)


def literal_scores(prior_weights, phi, mu, sigma, theta_samples) -> np.ndarray:
    """Mean over samples of p_j(θ_k) / Σ_j' prior_j' p_j'(θ_k); samples with a zero marginal are skipped."""
    phi, mu, sigma = np.atleast_2d(phi), np.atleast_2d(mu), np.atleast_2d(sigma)
    th = np.asarray(theta_samples, dtype=np.float64).reshape(-1)
    n_h = phi.shape[0]
    # log p_j(θ_k) as an (N_h, N_s) table
    logp = np.stack([gmm_log_density(np.broadcast_to(phi[j], (th.size, phi.shape[1])),
                                     np.broadcast_to(mu[j], (th.size, phi.shape[1])),
                                     np.broadcast_to(sigma[j], (th.size, phi.shape[1])), th)
                     for j in range(n_h)])
    with np.errstate(divide="ignore"):
        logw = np.log(np.asarray(prior_weights, dtype=np.float64))[:, None]
    joint = logw + logp
    mx = joint.max(axis=0)
    ok = np.isfinite(mx)
    if not ok.any():
        return np.zeros(n_h)
    log_marg = mx[ok] + np.log(np.exp(joint[:, ok] - mx[ok]).sum(axis=0))
    return np.exp(logp[:, ok] - log_marg).mean(axis=1)


def posterior_from_mixtures(prior: PoseBelief, phi, mu, sigma, mode: str = "observed-steering",
                            theta_meas: float | None = None, sigma_meas: float = SIGMA_MEAS,
                            n_steer: int = N_STEER, kappa_max: float = 0.2,
                            rng: np.random.Generator | None = None,
                            sampler: Callable | None = None, strict: bool = False) -> PoseBelief:
    """Reweight ``prior`` given each hypothesis' steering mixture (rows of ``phi, mu, sigma``).

    ``sampler(prior_weights, phi, mu, sigma, n, rng)`` sets the steering
    sampling distribution of the ``paper-literal`` mode; it defaults to the
    prior-weighted marginal.
    """
    if mode not in MODES:
        raise ValueError(f"unknown update mode {mode!r}; expected one of {MODES}")
    if mode == "observed-steering":
        if theta_meas is None:
            raise ValueError("observed-steering mode needs the executed curvature")
        like = observed_likelihoods(phi, mu, sigma, theta_meas, sigma_meas, n_steer, kappa_max)
        if like[0] > 0 and np.allclose(like, like[0], rtol=1e-12, atol=0.0):
            # flat likelihood (to rounding): Bayes leaves the prior unchanged
            return prior.with_weights(prior.weights.copy())
        post = prior.weights * like
    else:
        rng = rng if rng is not None else np.random.default_rng(0)
        draw = sampler or sample_marginal
        samples = draw(prior.weights, phi, mu, sigma, n_steer, rng)
        post = prior.weights * literal_scores(prior.weights, phi, mu, sigma, samples)
    total = post.sum()
    if not (total > 0 and math.isfinite(total)):
        if strict:
            raise DegenerateUpdateError("all hypothesis likelihoods underflowed")
        return prior.with_weights(prior.weights.copy(), degenerate=True)
    return prior.with_weights(post / total)


def posterior_update(prior: PoseBelief, obs, graph: RoadGraph, model: ModelParams,
                     mode: str = "observed-steering", theta_meas: float | None = None,
                     sigma_meas: float = SIGMA_MEAS, n_steer: int = N_STEER,
                     rng: np.random.Generator | None = None, sampler: Callable | None = None,
                     strict: bool = False, size: int = DEFAULT_SIZE, resolution: float = DEFAULT_RESOLUTION,
                     stroke: float = DEFAULT_STROKE) -> PoseBelief:
    """Posterior pose belief after one observation and (optionally) the executed steering."""
    phi, mu, sigma = hypothesis_mixtures(model, obs, graph, prior.poses, size, resolution, stroke)
    return posterior_from_mixtures(prior, phi, mu, sigma, mode, theta_meas, sigma_meas, n_steer,
                                   model.config.kappa_max, rng, sampler, strict)


# --------------------------------------------------------------------------
# statistics

def weighted_moments(b: PoseBelief) -> tuple[np.ndarray, np.ndarray]:
    """Mean ``(x, y, alpha)`` (circular in alpha) and the 3x3 weighted covariance."""
    w = b.weights
    mx = float(w @ b.poses[:, 0])
    my = float(w @ b.poses[:, 1])
    ma = math.atan2(float(w @ np.sin(b.poses[:, 2])), float(w @ np.cos(b.poses[:, 2])))
    res = np.column_stack([b.poses[:, 0] - mx, b.poses[:, 1] - my, wrap_angle(b.poses[:, 2] - ma)])
    cov = (res * w[:, None]).T @ res
    return np.array([mx, my, ma]), cov


def belief_stats(b: PoseBelief) -> BeliefStats:
    _, cov = weighted_moments(b)
    sx, sy, sa = (max(float(cov[i, i]), 0.0) for i in range(3))
    sign, logdet = np.linalg.slogdet(cov + VARIANCE_FLOOR * np.eye(3))
    if sign <= 0:  # covariance numerically singular below the floor
        logdet = 3 * math.log(VARIANCE_FLOOR)
    entropy = 0.5 * (3 * math.log(2 * math.pi * math.e) + logdet)
    return BeliefStats(sx + sy, sa, sx + sy + sa, float(entropy))


def stats_reduction(before: BeliefStats, after: BeliefStats) -> dict[str, float]:
    """Prior minus posterior for each statistic; positive means the belief sharpened."""
    a, b = before.to_dict(), after.to_dict()
    return {k: a[k] - b[k] for k in a}


# --------------------------------------------------------------------------
# calibration and place recognition

def coverage_from_mixtures(phi, mu, sigma, targets, z: float, phi_min: float = PHI_MIN) -> np.ndarray:
    """Per-sample indicator: some component with weight >= ``phi_min`` has ``|θ - μ| <= z σ``."""
    if z < 0:
        raise ValueError("z must be >= 0")
    t = np.asarray(targets, dtype=np.float64).reshape(-1, 1)
    inside = (np.abs(t - mu) <= z * sigma) & (np.asarray(phi) >= phi_min)
    return inside.any(axis=1)


def calibration_fraction(model: ModelParams, dataset, z: float, phi_min: float = PHI_MIN) -> float:
    """Share of ``dataset`` samples whose target lies within ``z`` std of a retained component.

    ``dataset`` provides ``obs``, ``drivable`` and ``target`` arrays.
    """
    if len(dataset.target) == 0:
        raise ValueError("dataset is empty")
    phi, mu, sigma = predict_mixtures(model, dataset.obs, dataset.drivable)
    return float(coverage_from_mixtures(phi, mu, sigma, dataset.target, z, phi_min).mean())


def _normal_cdf(x):
    return 0.5 * (1.0 + math.erf(x / math.sqrt(2.0)))


def interval_union_coverage(phi, mu, sigma, z: float, phi_min: float = PHI_MIN) -> float:
    """Probability mass a single mixture puts on the union of its retained z-intervals."""
    iv = sorted((m - z * s, m + z * s) for p, m, s in zip(phi, mu, sigma) if p >= phi_min)
    merged: list[list[float]] = []
    for lo, hi in iv:
        if merged and lo <= merged[-1][1]:
            merged[-1][1] = max(merged[-1][1], hi)
        else:
            merged.append([lo, hi])
    mass = 0.0
    for lo, hi in merged:
        for p, m, s in zip(phi, mu, sigma):
            mass += p * (_normal_cdf((hi - m) / s) - _normal_cdf((lo - m) / s))
    return mass


def place_recognition(model: ModelParams, locations: Sequence[tuple], patches: Sequence) -> tuple[np.ndarray, np.ndarray]:
    """Score matrix ``S[i, j]`` = density of location i's executed steering under patch j.

    Returns the raw scores and the row-normalised scores.
    """
    if len(locations) != len(patches) or not locations:
        raise ValueError("need equal, non-empty lists of locations and patches")
    grids = np.stack([getattr(p, "drivable", p) for p in patches])
    n = len(locations)
    raw = np.empty((n, n))
    for i, (obs, theta) in enumerate(locations):
        phi, mu, sigma = predict_mixtures(model, np.asarray(getattr(obs, "raster", obs)), grids)
        raw[i] = np.exp(gmm_log_density(phi, mu, sigma, np.full(n, float(theta))))
    sums = raw.sum(axis=1, keepdims=True)
    norm = np.divide(raw, sums, out=np.full_like(raw, 1.0 / n), where=sums > 0)
    return raw, norm


def row_argmax(scores: np.ndarray) -> np.ndarray:
    """Column of the maximum in each row, lowest index on ties."""
    return np.argmax(scores, axis=1)
