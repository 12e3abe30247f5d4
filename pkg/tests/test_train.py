import math

import numpy as np
import pytest

from topo_nav.dataset import CurriculumConfig, build_curriculum
from topo_nav.mdn import ModelConfig, ModelParams, loss
from topo_nav.road_graph import WorldSpec
from topo_nav.train import TrainConfig, TrainingDivergedError, train

from test_mdn import SMALL, random_batch


class OneSample:
    def __init__(self, batch):
        self.b = batch

    def __len__(self):
        return len(self.b)

    def batch(self, idx):
        return self.b.take(idx)


def test_zero_epochs_is_identity():
    p = ModelParams.init(SMALL, np.random.default_rng(0))
    q, hist = train(p, OneSample(random_batch(np.random.default_rng(1), 16)), TrainConfig(epochs=0))
    assert hist.loss == []
    for n in p.tensors:
        np.testing.assert_array_equal(q.tensors[n], p.tensors[n])


def test_single_sample_overfits_to_sigma_floor():
    b = random_batch(np.random.default_rng(0), 16)
    p = ModelParams.init(SMALL, np.random.default_rng(1))
    # no mirroring: a reflected copy would make this a two-sample problem
    q, _ = train(p, OneSample(b), TrainConfig(learning_rate=0.01, epochs=500, batch_size=1, lr_decay=1e-3,
                                              mirror=False))
    _, terms = loss(q, b, return_terms=True)
    floor = 0.5 * math.log(2 * math.pi * math.e) + math.log(SMALL.sigma_min)
    assert terms["nll"] < floor + 0.1


def test_training_is_bitwise_deterministic():
    b = random_batch(np.random.default_rng(0), 16, 20)
    runs = []
    for _ in range(2):
        p = ModelParams.init(SMALL, np.random.default_rng(1))
        q, h = train(p, OneSample(b), TrainConfig(epochs=3, batch_size=8, seed=4))
        runs.append((q, h))
    for n in runs[0][0].tensors:
        assert runs[0][0].tensors[n].tobytes() == runs[1][0].tensors[n].tobytes()
    assert runs[0][1].to_csv() == runs[1][1].to_csv()


def test_divergence_is_reported():
    b = random_batch(np.random.default_rng(0), 16, 8)
    p = ModelParams.init(SMALL, np.random.default_rng(1))
    with pytest.raises(TrainingDivergedError):
        train(p, OneSample(b), TrainConfig(learning_rate=200.0, momentum=0.99, epochs=30, batch_size=8,
                                           clip_norm=None, mirror=False))


def test_empty_dataset_rejected():
    class Empty:
        def __len__(self):
            return 0
    with pytest.raises(ValueError):
        train(ModelParams.zeros(SMALL), Empty())


def test_curriculum_loss_trends_down():
    cfg = CurriculumConfig(n_samples=400, worlds=(WorldSpec("four-way", 120.0, 40.0), WorldSpec("grid", 160.0, 80.0)),
                           seed=3)
    ds = build_curriculum(cfg)
    assert len(ds) == 400
    assert np.abs(ds.target).max() <= 0.2
    p = ModelParams.init(ModelConfig(), np.random.default_rng(0))
    _, hist = train(p, ds, TrainConfig(epochs=4, batch_size=32))
    smoothed = np.convolve(hist.loss[1:], np.ones(2) / 2, mode="valid")
    assert smoothed[-1] < hist.loss[0]
    assert hist.to_csv().splitlines()[0].startswith("epoch,loss")


def test_curriculum_is_deterministic():
    cfg = CurriculumConfig(n_samples=60, worlds=(WorldSpec("t-junction", 120.0, 40.0),), seed=9)
    a, b = build_curriculum(cfg), build_curriculum(cfg)
    np.testing.assert_array_equal(a.obs, b.obs)
    np.testing.assert_array_equal(a.target, b.target)
    assert not (a.route.astype(bool) & ~a.drivable.astype(bool)).any()
