"""Mixture-density steering model with a routed deterministic head.

Two parallel encoders (observation raster, unrouted map patch) feed a fully
connected trunk whose output parameterises a K-component Gaussian mixture
over curvature.  A third encoder reads the routed patch; its features are
concatenated with the trunk's last hidden layer to produce one deterministic
curvature.  Every stage is written out by hand with an explicit backward pass
in float64.

Convolutions are non-overlapping (kernel == stride), which reduces each stage
to a reshape plus a matrix product.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

CHECKPOINT_FORMAT = "topo-nav-checkpoint"
CHECKPOINT_VERSION = 1
_LOG_2PI = math.log(2.0 * math.pi)


class ChannelMismatchError(ValueError):
    pass


class NumericOverflowError(FloatingPointError):
    def __init__(self, term: str):
        super().__init__(f"non-finite value in loss term {term!r}")
        self.term = term


@dataclass(frozen=True)
class ModelConfig:
    n_components: int = 3
    kappa_max: float = 0.2
    sigma_center: float = math.log(0.02)
    lambda_phi: float = 0.01
    lambda_sigma: float = 0.05
    eps: float = 1e-6
    sigma_min: float = 1e-3
    sigma_max: float = 1.0
    sigma_bias_init: float = math.log(0.05)
    mu_spread_init: float = 0.5    # initial means spread over +-this fraction of kappa_max
    size: int = 64
    obs_kernels: tuple[int, int] = (4, 4)
    obs_channels: tuple[int, int] = (8, 16)
    map_kernel: int = 8
    map_channels: int = 8
    route_kernel: int = 8
    route_channels: int = 8
    trunk: tuple[int, int] = (64, 32)
    det_hidden: int = 32

    def __post_init__(self):
        if self.n_components < 1:
            raise ValueError("n_components must be >= 1")
        if not self.eps > 0:
            raise ValueError("eps must be > 0")
        if not 0 < self.sigma_min < self.sigma_max:
            raise ValueError("need 0 < sigma_min < sigma_max")
        if not 0.0 <= self.mu_spread_init < 1.0:
            raise ValueError("mu_spread_init must lie in [0, 1)")
        k1, k2 = self.obs_kernels
        if self.size % (k1 * k2) or self.size % self.map_kernel or self.size % self.route_kernel:
            raise ValueError("patch size must be divisible by every encoder's total stride")

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        kw = dict(d)
        for name in ("obs_kernels", "obs_channels", "trunk"):
            if name in kw:
                kw[name] = tuple(kw[name])
        return cls(**kw)

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            out[f.name] = list(v) if isinstance(v, tuple) else v
        return out

    def shapes(self) -> dict[str, tuple[int, ...]]:
        k1, k2 = self.obs_kernels
        c1, c2 = self.obs_channels
        h1, h2 = self.trunk
        s = self.size
        obs_feat = (s // (k1 * k2)) ** 2 * c2
        map_feat = (s // self.map_kernel) ** 2 * self.map_channels
        route_feat = (s // self.route_kernel) ** 2 * self.route_channels
        return {
            "obs1_w": (k1 * k1, c1), "obs1_b": (c1,),
            "obs2_w": (k2 * k2 * c1, c2), "obs2_b": (c2,),
            "map_w": (self.map_kernel ** 2, self.map_channels), "map_b": (self.map_channels,),
            "fc1_w": (obs_feat + map_feat, h1), "fc1_b": (h1,),
            "fc2_w": (h1, h2), "fc2_b": (h2,),
            "head_w": (h2, 3 * self.n_components), "head_b": (3 * self.n_components,),
            "route_w": (self.route_kernel ** 2 * 2, self.route_channels), "route_b": (self.route_channels,),
            "det1_w": (h2 + route_feat, self.det_hidden), "det1_b": (self.det_hidden,),
            "det2_w": (self.det_hidden, 1), "det2_b": (1,),
        }


PARAM_NAMES = tuple(ModelConfig().shapes())
DET_ONLY = ("route_w", "route_b", "det1_w", "det1_b", "det2_w", "det2_b")


@dataclass
class ModelParams:
    config: ModelConfig
    tensors: dict[str, np.ndarray] = field(default_factory=dict)

    def __getitem__(self, name):
        return self.tensors[name]

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, {k: v.copy() for k, v in self.tensors.items()})

    def n_parameters(self) -> int:
        return int(sum(v.size for v in self.tensors.values()))

    def _head_bias(self) -> np.ndarray:
        k = self.config.n_components
        b = np.zeros(3 * k)
        b[2 * k:] = self.config.sigma_bias_init
        return b

    @classmethod
    def zeros(cls, config: ModelConfig) -> "ModelParams":
        """All weights zero; biases at their initial values."""
        p = cls(config, {n: np.zeros(s) for n, s in config.shapes().items()})
        p.tensors["head_b"] = p._head_bias()
        return p

    @classmethod
    def init(cls, config: ModelConfig, rng: np.random.Generator) -> "ModelParams":
        """He-normal weights.  Head biases start with distinct component means
        so that components do not begin as interchangeable copies."""
        p = cls.zeros(config)
        k = config.n_components
        if k > 1:
            p.tensors["head_b"][k:2 * k] = np.arctanh(config.mu_spread_init * np.linspace(-1.0, 1.0, k))
        for name, shape in config.shapes().items():
            if name.endswith("_w"):
                p.tensors[name] = rng.normal(0.0, math.sqrt(2.0 / shape[0]), shape)
        p.tensors["head_w"] *= 0.1
        p.tensors["det2_w"] *= 0.1
        return p

    def all_finite(self) -> bool:
        return all(np.isfinite(v).all() for v in self.tensors.values())


# --------------------------------------------------------------------------
# layers

def _patchify(x: np.ndarray, k: int) -> np.ndarray:
    """``(B, H, W, C)`` -> ``(B, H/k, W/k, k*k*C)`` non-overlapping patches."""
    b, h, w, c = x.shape
    return x.reshape(b, h // k, k, w // k, k, c).transpose(0, 1, 3, 2, 4, 5).reshape(b, h // k, w // k, k * k * c)


def _unpatchify(p: np.ndarray, k: int, c: int) -> np.ndarray:
    b, hh, ww, _ = p.shape
    return p.reshape(b, hh, ww, k, k, c).transpose(0, 1, 3, 2, 4, 5).reshape(b, hh * k, ww * k, c)


def _conv(x, w, b, k):
    patches = _patchify(x, k)
    pre = patches @ w + b
    return np.maximum(pre, 0.0), (patches, pre)


def _conv_back(dout, cache, w, k, c_in, need_input_grad=True):
    patches, pre = cache
    dpre = dout * (pre > 0)
    flat = dpre.reshape(-1, dpre.shape[-1])
    dw = patches.reshape(-1, patches.shape[-1]).T @ flat
    db = flat.sum(axis=0)
    dx = _unpatchify(dpre @ w.T, k, c_in) if need_input_grad else None
    return dx, dw, db


def _as_float(grids, channels_last=True) -> np.ndarray:
    a = np.asarray(grids, dtype=np.float64)
    if a.ndim == 2:
        a = a[None]
    return a[..., None] if channels_last and a.ndim == 3 else a


# --------------------------------------------------------------------------
# forward / backward

@dataclass
class Outputs:
    phi: np.ndarray          # (B, K)
    mu: np.ndarray           # (B, K)
    sigma: np.ndarray        # (B, K)
    log_phi: np.ndarray
    log_sigma: np.ndarray
    det: np.ndarray | None   # (B,)
    cache: dict


def forward(params: ModelParams, obs, drivable, route=None) -> Outputs:
    """Run the network on stacked ``(B, S, S)`` grids.

    ``route`` enables the deterministic head; it must be the route channel of
    routed patches whose drivable channel is ``drivable``.
    """
    cfg = params.config
    t = params.tensors
    k1, k2 = cfg.obs_kernels
    x_obs = _as_float(obs)
    x_map = _as_float(drivable)
    if x_obs.shape[1] != cfg.size or x_map.shape[1] != cfg.size:
        raise ChannelMismatchError(f"expected {cfg.size}x{cfg.size} grids, got {x_obs.shape[1:3]} / {x_map.shape[1:3]}")
    bsz = x_obs.shape[0]

    o1, c_o1 = _conv(x_obs, t["obs1_w"], t["obs1_b"], k1)
    o2, c_o2 = _conv(o1, t["obs2_w"], t["obs2_b"], k2)
    m1, c_m1 = _conv(x_map, t["map_w"], t["map_b"], cfg.map_kernel)
    feat = np.concatenate([o2.reshape(bsz, -1), m1.reshape(bsz, -1)], axis=1)
    z1 = feat @ t["fc1_w"] + t["fc1_b"]
    h1 = np.maximum(z1, 0.0)
    z2 = h1 @ t["fc2_w"] + t["fc2_b"]
    h2 = np.maximum(z2, 0.0)
    a = h2 @ t["head_w"] + t["head_b"]

    k = cfg.n_components
    raw_phi, raw_mu, raw_s = a[:, :k], a[:, k:2 * k], a[:, 2 * k:]
    shifted = raw_phi - raw_phi.max(axis=1, keepdims=True)
    log_phi = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    phi = np.exp(log_phi)
    tanh_mu = np.tanh(raw_mu)
    mu = cfg.kappa_max * tanh_mu
    log_sigma = np.clip(raw_s, math.log(cfg.sigma_min), math.log(cfg.sigma_max))
    sigma = np.exp(log_sigma)

    cache = dict(c_o1=c_o1, c_o2=c_o2, c_m1=c_m1, o2_shape=o2.shape, m1_shape=m1.shape, feat=feat,
                 z1=z1, h1=h1, z2=z2, h2=h2, raw_s=raw_s, tanh_mu=tanh_mu)
    det = None
    if route is not None:
        x_route = np.concatenate([x_map, _as_float(route)], axis=3)
        r1, c_r1 = _conv(x_route, t["route_w"], t["route_b"], cfg.route_kernel)
        dfeat = np.concatenate([h2, r1.reshape(bsz, -1)], axis=1)
        zd = dfeat @ t["det1_w"] + t["det1_b"]
        hd = np.maximum(zd, 0.0)
        zo = (hd @ t["det2_w"] + t["det2_b"])[:, 0]
        tanh_d = np.tanh(zo)
        det = cfg.kappa_max * tanh_d
        cache.update(c_r1=c_r1, r1_shape=r1.shape, dfeat=dfeat, zd=zd, hd=hd, tanh_d=tanh_d)
    return Outputs(phi, mu, sigma, log_phi, log_sigma, det, cache)


def _component_logpdf(theta, mu, sigma, log_sigma):
    z = (theta[:, None] - mu) / sigma
    return -0.5 * _LOG_2PI - log_sigma - 0.5 * z * z


def loss_terms(params: ModelParams, out: Outputs, target) -> dict[str, np.ndarray]:
    """Per-sample loss terms (each ``(B,)``)."""
    cfg = params.config
    theta = np.asarray(target, dtype=np.float64).reshape(-1)
    logs = out.log_phi + _component_logpdf(theta, out.mu, out.sigma, out.log_sigma)
    mx = logs.max(axis=1, keepdims=True)
    nll = -(mx[:, 0] + np.log(np.exp(logs - mx).sum(axis=1)))
    root = np.sqrt(out.phi + cfg.eps).sum(axis=1)
    terms = {
        "nll": nll,
        "phi_penalty": cfg.lambda_phi * root ** 2,
        "sigma_penalty": cfg.lambda_sigma * ((out.log_sigma - cfg.sigma_center) ** 2).sum(axis=1),
    }
    if out.det is not None:
        terms["det"] = (out.det - theta) ** 2
    for name, v in terms.items():
        if not np.isfinite(v).all():
            raise NumericOverflowError(name)
    return terms


def backward(params: ModelParams, out: Outputs, target) -> dict[str, np.ndarray]:
    """Gradient of the batch-mean loss with respect to every tensor."""
    cfg = params.config
    t = params.tensors
    c = out.cache
    k1, k2 = cfg.obs_kernels
    theta = np.asarray(target, dtype=np.float64).reshape(-1)
    bsz = theta.shape[0]
    inv_b = 1.0 / bsz

    # negative log-likelihood
    logs = out.log_phi + _component_logpdf(theta, out.mu, out.sigma, out.log_sigma)
    resp = np.exp(logs - logs.max(axis=1, keepdims=True))
    resp /= resp.sum(axis=1, keepdims=True)
    diff = theta[:, None] - out.mu
    d_raw_phi = out.phi - resp
    d_mu = -resp * diff / out.sigma ** 2
    d_log_sigma = -resp * (diff ** 2 / out.sigma ** 2 - 1.0)

    # ||phi||_{1/2} penalty through the softmax
    sq = np.sqrt(out.phi + cfg.eps)
    g_phi = cfg.lambda_phi * sq.sum(axis=1, keepdims=True) / sq
    d_raw_phi += out.phi * (g_phi - (out.phi * g_phi).sum(axis=1, keepdims=True))

    # log-sigma penalty
    d_log_sigma += 2.0 * cfg.lambda_sigma * (out.log_sigma - cfg.sigma_center)
    in_range = (c["raw_s"] >= math.log(cfg.sigma_min)) & (c["raw_s"] <= math.log(cfg.sigma_max))
    d_raw_s = d_log_sigma * in_range
    d_raw_mu = d_mu * cfg.kappa_max * (1.0 - c["tanh_mu"] ** 2)

    da = np.concatenate([d_raw_phi, d_raw_mu, d_raw_s], axis=1) * inv_b
    g: dict[str, np.ndarray] = {}
    g["head_w"] = c["h2"].T @ da
    g["head_b"] = da.sum(axis=0)
    dh2 = da @ t["head_w"].T

    if out.det is not None:
        dzo = 2.0 * (out.det - theta) * cfg.kappa_max * (1.0 - c["tanh_d"] ** 2) * inv_b
        g["det2_w"] = c["hd"].T @ dzo[:, None]
        g["det2_b"] = np.array([dzo.sum()])
        dzd = (dzo[:, None] @ t["det2_w"].T) * (c["zd"] > 0)
        g["det1_w"] = c["dfeat"].T @ dzd
        g["det1_b"] = dzd.sum(axis=0)
        ddfeat = dzd @ t["det1_w"].T
        h2n = c["h2"].shape[1]
        dh2 = dh2 + ddfeat[:, :h2n]
        dr1 = ddfeat[:, h2n:].reshape(c["r1_shape"])
        _, g["route_w"], g["route_b"] = _conv_back(dr1, c["c_r1"], t["route_w"], cfg.route_kernel, 2,
                                                   need_input_grad=False)
    else:
        for name in DET_ONLY:
            g[name] = np.zeros_like(t[name])

    dz2 = dh2 * (c["z2"] > 0)
    g["fc2_w"] = c["h1"].T @ dz2
    g["fc2_b"] = dz2.sum(axis=0)
    dz1 = (dz2 @ t["fc2_w"].T) * (c["z1"] > 0)
    g["fc1_w"] = c["feat"].T @ dz1
    g["fc1_b"] = dz1.sum(axis=0)
    dfeat = dz1 @ t["fc1_w"].T
    n_obs = int(np.prod(c["o2_shape"][1:]))
    do2 = dfeat[:, :n_obs].reshape(c["o2_shape"])
    dm1 = dfeat[:, n_obs:].reshape(c["m1_shape"])
    _, g["map_w"], g["map_b"] = _conv_back(dm1, c["c_m1"], t["map_w"], cfg.map_kernel, 1, need_input_grad=False)
    do1, g["obs2_w"], g["obs2_b"] = _conv_back(do2, c["c_o2"], t["obs2_w"], k2, cfg.obs_channels[0])
    _, g["obs1_w"], g["obs1_b"] = _conv_back(do1, c["c_o1"], t["obs1_w"], k1, 1, need_input_grad=False)
    return g


# --------------------------------------------------------------------------
# public operations

@dataclass(frozen=True)
class GmmParams:
    phi: np.ndarray
    mu: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "phi", np.asarray(self.phi, dtype=np.float64).reshape(-1))
        object.__setattr__(self, "mu", np.asarray(self.mu, dtype=np.float64).reshape(-1))
        object.__setattr__(self, "sigma", np.asarray(self.sigma, dtype=np.float64).reshape(-1))
        if not (self.phi.shape == self.mu.shape == self.sigma.shape):
            raise ValueError("phi, mu and sigma must have the same length")

    @property
    def n_components(self) -> int:
        return self.phi.shape[0]

    def check(self, kappa_max: float | None = None, tol: float = 1e-9) -> None:
        if (self.phi < 0).any() or abs(self.phi.sum() - 1.0) > tol:
            raise ValueError("mixture weights must be non-negative and sum to 1")
        if not (self.sigma > 0).all():
            raise ValueError("component std must be > 0")
        if kappa_max is not None and (np.abs(self.mu) > kappa_max).any():
            raise ValueError("component mean exceeds kappa_max")


def gmm_density(g: GmmParams, theta):
    """Mixture density at ``theta`` (scalar or array), units of 1/curvature."""
    th = np.asarray(theta, dtype=np.float64)
    z = (th[..., None] - g.mu) / g.sigma
    dens = (g.phi * np.exp(-0.5 * z * z) / (math.sqrt(2.0 * math.pi) * g.sigma)).sum(axis=-1)
    return float(dens) if dens.ndim == 0 else dens


def gmm_log_density(phi, mu, sigma, theta) -> np.ndarray:
    """Batched log-density: ``phi, mu, sigma`` are ``(B, K)``, ``theta`` ``(B,)``."""
    logs = np.log(phi) + _component_logpdf(np.asarray(theta, dtype=np.float64).reshape(-1), mu, sigma, np.log(sigma))
    mx = logs.max(axis=1, keepdims=True)
    return mx[:, 0] + np.log(np.exp(logs - mx).sum(axis=1))


def _grid_of(patch_like):
    return patch_like.drivable if hasattr(patch_like, "drivable") else patch_like


def forward_stochastic(params: ModelParams, obs, map_u) -> GmmParams:
    """Steering mixture for one observation and one unrouted patch."""
    if getattr(map_u, "route", None) is not None:
        raise ChannelMismatchError("forward_stochastic needs an unrouted patch (got a route channel)")
    raster = getattr(obs, "raster", obs)
    out = forward(params, raster, _grid_of(map_u))
    return GmmParams(out.phi[0], out.mu[0], out.sigma[0])


def forward_deterministic(params: ModelParams, obs, map_r) -> float:
    """Curvature command along the route drawn in ``map_r``."""
    if getattr(map_r, "route", None) is None:
        raise ChannelMismatchError("forward_deterministic needs a routed patch (route channel missing)")
    raster = getattr(obs, "raster", obs)
    out = forward(params, raster, map_r.drivable, map_r.route)
    return float(out.det[0])


def predict_mixtures(params: ModelParams, obs, drivable, batch_size: int = 512) -> tuple[np.ndarray, ...]:
    """``(phi, mu, sigma)`` for stacked inputs, evaluated in chunks."""
    obs = np.asarray(obs)
    drivable = np.asarray(drivable)
    if obs.ndim == 2:
        obs = np.broadcast_to(obs, drivable.shape)
    parts = [[], [], []]
    for i in range(0, drivable.shape[0], batch_size):
        out = forward(params, obs[i:i + batch_size], drivable[i:i + batch_size])
        parts[0].append(out.phi)
        parts[1].append(out.mu)
        parts[2].append(out.sigma)
    return tuple(np.concatenate(p) for p in parts)


def predict_det(params: ModelParams, obs, drivable, route, batch_size: int = 512) -> np.ndarray:
    obs, drivable, route = np.asarray(obs), np.asarray(drivable), np.asarray(route)
    out = [forward(params, obs[i:i + batch_size], drivable[i:i + batch_size], route[i:i + batch_size]).det
           for i in range(0, obs.shape[0], batch_size)]
    return np.concatenate(out)


@dataclass
class Batch:
    """Stacked training samples: observation, unrouted drivable, route channel, target."""

    obs: np.ndarray
    drivable: np.ndarray
    route: np.ndarray | None
    target: np.ndarray

    def __post_init__(self):
        self.target = np.asarray(self.target, dtype=np.float64).reshape(-1)
        if self.target.size == 0:
            raise ValueError("batch must be non-empty")

    def __len__(self):
        return self.target.shape[0]

    @classmethod
    def from_samples(cls, samples: Sequence[tuple]) -> "Batch":
        """From ``(Observation, unrouted MapPatch, routed MapPatch, target)`` tuples."""
        if not samples:
            raise ValueError("batch must be non-empty")
        obs = np.stack([getattr(s[0], "raster", s[0]) for s in samples])
        drivable = np.stack([_grid_of(s[1]) for s in samples])
        routed = [s[2] for s in samples]
        route = None if routed[0] is None else np.stack([r.route for r in routed])
        return cls(obs, drivable, route, np.asarray([s[3] for s in samples]))

    def take(self, idx) -> "Batch":
        return Batch(self.obs[idx], self.drivable[idx], None if self.route is None else self.route[idx],
                     self.target[idx])


def loss(params: ModelParams, batch: Batch, return_terms: bool = False):
    """Batch-mean loss: mixture NLL + weight penalty + log-sigma penalty + squared deterministic error."""
    out = forward(params, batch.obs, batch.drivable, batch.route)
    terms = loss_terms(params, out, batch.target)
    total = float(sum(v.mean() for v in terms.values()))
    if not math.isfinite(total):
        raise NumericOverflowError("total")
    if return_terms:
        return total, {k: float(v.mean()) for k, v in terms.items()}
    return total


def backprop_gradients(params: ModelParams, batch: Batch) -> tuple[float, dict[str, np.ndarray]]:
    """Loss value and its exact gradient with respect to every parameter tensor."""
    out = forward(params, batch.obs, batch.drivable, batch.route)
    terms = loss_terms(params, out, batch.target)
    total = float(sum(v.mean() for v in terms.values()))
    return total, backward(params, out, batch.target)


# --------------------------------------------------------------------------
# checkpoints

def checkpoint_dumps(params: ModelParams, extra: dict | None = None) -> str:
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": params.config.to_dict(),
        "extra": extra or {},
        "tensors": {name: {"shape": list(params.tensors[name].shape),
                           "data": [float(x) for x in params.tensors[name].ravel()]}
                    for name in sorted(params.tensors)},
    }
    return json.dumps(doc, sort_keys=True, separators=(",", ":")) + "\n"


def checkpoint_loads(text: str) -> ModelParams:
    doc = json.loads(text)
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError("not a topo-nav checkpoint")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {doc.get('version')}")
    cfg = ModelConfig.from_dict(doc["config"])
    tensors = {n: np.asarray(v["data"], dtype=np.float64).reshape(v["shape"]) for n, v in doc["tensors"].items()}
    expected = cfg.shapes()
    for n, shape in expected.items():
        if n not in tensors or tensors[n].shape != shape:
            raise ValueError(f"checkpoint tensor {n} missing or mis-shaped")
    return ModelParams(cfg, tensors)


def save_checkpoint(path: str | Path, params: ModelParams, extra: dict | None = None) -> None:
    Path(path).write_text(checkpoint_dumps(params, extra))


def load_checkpoint(path: str | Path) -> ModelParams:
    return checkpoint_loads(Path(path).read_text())
