"""Minibatch SGD with momentum for :mod:`topo_nav.mdn`."""
from __future__ import annotations

import io
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .mdn import DET_ONLY, Batch, ModelParams, backprop_gradients, loss

log = logging.getLogger(__name__)


class TrainingDivergedError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.01
    momentum: float = 0.9
    epochs: int = 40
    batch_size: int = 64
    seed: int = 0
    clip_norm: float | None = 5.0
    det_lr_scale: float = 30.0     # learning-rate multiplier for the routed-head-only tensors
    lr_decay: float = 0.1          # final learning rate as a fraction of the initial one (cosine)
    divergence_factor: float = 10.0
    divergence_patience: int = 3
    mirror: bool = True            # reflect a random half of every batch about the heading axis


@dataclass
class History:
    epoch: list[int] = field(default_factory=list)
    loss: list[float] = field(default_factory=list)
    terms: list[dict[str, float]] = field(default_factory=list)

    def to_csv(self) -> str:
        names = sorted({k for t in self.terms for k in t})
        buf = io.StringIO()
        buf.write(",".join(["epoch", "loss", *names]) + "\n")
        for e, l, t in zip(self.epoch, self.loss, self.terms):
            buf.write(",".join([str(e), repr(l), *(repr(t.get(n, float("nan"))) for n in names)]) + "\n")
        return buf.getvalue()


def _batch_of(dataset, idx) -> Batch:
    return dataset.batch(idx) if hasattr(dataset, "batch") else dataset.take(idx)


def mirror_grids(grids: np.ndarray) -> np.ndarray:
    """Reflect ``(B, S, S)`` ego-frame grids about the heading axis.

    The vehicle sits at column ``S / 2``, so column ``j`` maps to ``S - j``;
    column 0 has no source and is cleared.
    """
    out = np.zeros_like(grids)
    out[..., 1:] = grids[..., :0:-1]
    return out


def mirror_batch(batch: Batch, mask: np.ndarray) -> Batch:
    """Batch with the samples selected by ``mask`` reflected and their curvature negated."""
    if not mask.any():
        return batch
    obs, drivable, target = batch.obs.copy(), batch.drivable.copy(), batch.target.copy()
    obs[mask] = mirror_grids(obs[mask])
    drivable[mask] = mirror_grids(drivable[mask])
    target[mask] = -target[mask]
    route = None
    if batch.route is not None:
        route = batch.route.copy()
        route[mask] = mirror_grids(route[mask])
    return Batch(obs, drivable, route, target)


def evaluate_loss(params: ModelParams, dataset, batch_size: int = 512) -> tuple[float, dict[str, float]]:
    n = len(dataset)
    total = 0.0
    acc: dict[str, float] = {}
    for i in range(0, n, batch_size):
        idx = np.arange(i, min(n, i + batch_size))
        l, terms = loss(params, _batch_of(dataset, idx), return_terms=True)
        total += l * len(idx)
        for k, v in terms.items():
            acc[k] = acc.get(k, 0.0) + v * len(idx)
    return total / n, {k: v / n for k, v in acc.items()}


def train(params: ModelParams, dataset, opt: TrainConfig = TrainConfig(),
          rng: np.random.Generator | None = None) -> tuple[ModelParams, History]:
    """Train a copy of ``params``; returns the trained copy and the per-epoch history.

    Epoch 0 of the history is the loss before any update.  Training stops with
    :class:`TrainingDivergedError` when the epoch loss exceeds
    ``initial + divergence_factor * max(|initial|, 1)`` for
    ``divergence_patience`` consecutive epochs.
    """
    n = len(dataset)
    if n == 0:
        raise ValueError("dataset is empty")
    rng = rng if rng is not None else np.random.default_rng(opt.seed)
    params = params.copy()
    history = History()
    if opt.epochs <= 0:
        return params, history

    initial, terms = evaluate_loss(params, dataset)
    history.epoch.append(0)
    history.loss.append(initial)
    history.terms.append(terms)
    limit = initial + opt.divergence_factor * max(abs(initial), 1.0)
    velocity = {k: np.zeros_like(v) for k, v in params.tensors.items()}
    steps_per_epoch = math.ceil(n / opt.batch_size)
    total_steps = steps_per_epoch * opt.epochs
    step = 0
    bad = 0
    for epoch in range(1, opt.epochs + 1):
        order = rng.permutation(n)
        acc = 0.0
        for b in range(steps_per_epoch):
            idx = np.sort(order[b * opt.batch_size:(b + 1) * opt.batch_size])
            batch = _batch_of(dataset, idx)
            if opt.mirror:
                batch = mirror_batch(batch, rng.random(len(idx)) < 0.5)
            value, grads = backprop_gradients(params, batch)
            if not math.isfinite(value):
                raise TrainingDivergedError(f"non-finite loss at epoch {epoch}")
            acc += value * len(idx)
            if opt.clip_norm is not None:
                norm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
                if norm > opt.clip_norm:
                    scale = opt.clip_norm / norm
                    grads = {k: g * scale for k, g in grads.items()}
            frac = step / max(total_steps - 1, 1)
            lr = opt.learning_rate * (opt.lr_decay + (1.0 - opt.lr_decay) * 0.5 * (1.0 + math.cos(math.pi * frac)))
            for name, g in grads.items():
                v = velocity[name]
                v *= opt.momentum
                v -= (lr * opt.det_lr_scale if name in DET_ONLY else lr) * g
                params.tensors[name] += v
            step += 1
        epoch_loss = acc / n
        history.epoch.append(epoch)
        history.loss.append(epoch_loss)
        history.terms.append({})
        log.info("epoch %d loss %.5f", epoch, epoch_loss)
        bad = bad + 1 if epoch_loss > limit else 0
        if bad >= opt.divergence_patience:
            raise TrainingDivergedError(
                f"loss {epoch_loss:.4g} above {limit:.4g} for {bad} consecutive epochs")
    return params, history
