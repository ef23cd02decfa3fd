import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import finite_difference, rel_err
from retina_dx.nn import LayerSpec, NetworkConfig, build_network, preset
from retina_dx.nn import layers as layers_mod
from retina_dx.tensor_core import Rng
from retina_dx.train_engine import (
    EmptyDatasetError,
    MetricsRecord,
    OptimizerState,
    TrainingConfig,
    best_epoch,
    evaluate,
    grad_check,
    lr_for_epoch,
    sgdm_step,
    train,
)


# -- schedule ----------------------------------------------------------------

def test_lr_first_period_unchanged():
    cfg = TrainingConfig()
    assert [lr_for_epoch(cfg, e) for e in range(1, 6)] == [0.01] * 5


def test_lr_drops_at_period_boundary():
    cfg = TrainingConfig()
    assert math.isclose(lr_for_epoch(cfg, 6) / lr_for_epoch(cfg, 5), 0.2)
    assert math.isclose(lr_for_epoch(cfg, 11), 0.0004, rel_tol=1e-12)
    assert math.isclose(lr_for_epoch(cfg, 20), 8e-5, rel_tol=1e-12)


@given(lr=st.floats(1e-5, 1.0), drop=st.floats(0.01, 1.0), period=st.integers(1, 10),
       epoch=st.integers(1, 60))
def test_lr_piecewise_constant(lr, drop, period, epoch):
    cfg = TrainingConfig(initial_lr=lr, lr_drop_factor=drop, lr_drop_period_epochs=period, max_epochs=60)
    k = (epoch - 1) // period
    assert math.isclose(lr_for_epoch(cfg, epoch), lr * drop ** k, rel_tol=1e-12)
    start = k * period + 1
    assert lr_for_epoch(cfg, epoch) == lr_for_epoch(cfg, start)


def test_lr_epoch_out_of_range():
    with pytest.raises(ValueError):
        lr_for_epoch(TrainingConfig(), 0)


@pytest.mark.parametrize("kwargs", [
    {"lr_drop_factor": 0.0}, {"max_epochs": 0}, {"batch_size": 0}, {"momentum": 1.0},
    {"initial_lr": -1.0}, {"lr_drop_period_epochs": 0},
])
def test_training_config_validation(kwargs):
    with pytest.raises(ValueError):
        TrainingConfig(**kwargs)


# -- optimizer ---------------------------------------------------------------

def test_sgdm_two_steps():
    w = {"w": np.array([1.0])}
    state = OptimizerState.zeros_like(w)
    sgdm_step(w, {"w": np.array([10.0])}, state, 0.01, 0.9)
    assert math.isclose(w["w"][0], 0.9)
    sgdm_step(w, {"w": np.array([10.0])}, state, 0.01, 0.9)
    assert math.isclose(w["w"][0], 0.71)


def test_sgdm_zero_momentum_is_plain_sgd(rng):
    w0 = rng.standard_normal(5)
    w = {"w": w0.copy()}
    state = OptimizerState.zeros_like(w)
    for _ in range(3):
        g = rng.standard_normal(5)
        expect = w["w"] - 0.1 * g
        sgdm_step(w, {"w": g}, state, 0.1, 0.0)
        np.testing.assert_allclose(w["w"], expect, rtol=1e-15)


def test_sgdm_updates_in_place():
    arr = np.ones(3, np.float32)
    params = {"w": arr}
    sgdm_step(params, {"w": np.ones(3, np.float32)}, OptimizerState.zeros_like(params), 0.5, 0.9)
    assert params["w"] is arr and np.all(arr == 0.5)


def test_sgdm_key_mismatch():
    with pytest.raises(KeyError):
        sgdm_step({"a": np.zeros(1)}, {"b": np.zeros(1)}, OptimizerState({"a": np.zeros(1)}), 0.1, 0.9)


def test_sgdm_shape_mismatch():
    with pytest.raises(ValueError):
        sgdm_step({"a": np.zeros(2)}, {"a": np.zeros(3)}, OptimizerState({"a": np.zeros(2)}), 0.1, 0.9)


# -- training loop -----------------------------------------------------------

def tiny_config(size=8):
    layers = [LayerSpec("conv", {"filter_h": 3, "filter_w": 3, "num_filters": 2}),
              LayerSpec("batchnorm"),
              LayerSpec("relu"),
              LayerSpec("maxpool", {}),
              LayerSpec("fc", {"output_size": 2}),
              LayerSpec("softmax")]
    return NetworkConfig("tiny", (1, size, size), layers)


def toy_data(n, seed=0, size=8):
    """Class 1 images are brighter in the centre."""
    g = np.random.default_rng(seed)
    y = np.arange(n) % 2
    x = g.uniform(0, 0.5, (n, 1, size, size)).astype(np.float32)
    x[y == 1, :, 2:6, 2:6] += 0.5
    return x, y


def run(seed=0, epochs=20, n=10, batch=4):
    net = build_network(tiny_config(), rng=Rng(seed))
    cfg = TrainingConfig(max_epochs=epochs, batch_size=batch, seed=seed)
    return train(net, toy_data(n), toy_data(4, 1), cfg)


def test_train_records_every_epoch():
    _, history = run()
    assert [r.epoch for r in history] == list(range(1, 21))
    assert [r.lr for r in history] == [lr_for_epoch(TrainingConfig(), e) for e in range(1, 21)]
    assert all(0 <= r.train_accuracy <= 1 and r.val_accuracy is not None for r in history)
    assert all(math.isfinite(r.train_loss) for r in history)


def test_train_is_deterministic():
    a_net, a = run(3, epochs=4)
    b_net, b = run(3, epochs=4)
    assert a == b
    for k, v in a_net.state_dict().items():
        np.testing.assert_array_equal(v, b_net.state_dict()[k])


def test_train_learns_easy_task():
    _, history = run(epochs=20)
    assert history[-1].train_loss < history[0].train_loss
    assert history[-1].train_accuracy == 1.0


def test_every_sample_seen_once_per_epoch():
    n = 11
    x, y = toy_data(n)
    x[:, 0, 0, 0] = np.arange(n)  # tag each sample
    net = build_network(tiny_config(), rng=Rng(0))
    seen = []
    original = net.forward

    def spy(batch, mode="inference"):
        if mode == "training":
            seen.extend(batch[:, 0, 0, 0].astype(int).tolist())
        return original(batch, mode)

    net.forward = spy
    epochs = 3
    train(net, (x, y), None, TrainingConfig(max_epochs=epochs, batch_size=4))
    assert len(seen) == n * epochs
    for e in range(epochs):
        assert sorted(seen[e * n:(e + 1) * n]) == list(range(n))
    assert seen[:n] != seen[n:2 * n]  # reshuffled


def test_train_without_validation():
    net = build_network(tiny_config(), rng=Rng(0))
    _, history = train(net, toy_data(6), None, TrainingConfig(max_epochs=2))
    assert all(r.val_accuracy is None for r in history)


def test_train_empty_set():
    net = build_network(tiny_config(), rng=Rng(0))
    with pytest.raises(EmptyDatasetError):
        train(net, (np.zeros((0, 1, 8, 8), np.float32), []), None, TrainingConfig())


def test_epoch_callback_sees_each_record():
    seen = []
    net = build_network(tiny_config(), rng=Rng(0))
    _, history = train(net, toy_data(6), None, TrainingConfig(max_epochs=3),
                       on_epoch_end=lambda rec, n: seen.append(rec))
    assert seen == history


# -- evaluation --------------------------------------------------------------

class FixedNet:
    def __init__(self, probs):
        self.probs = np.asarray(probs)

    def predict(self, x):
        return self.probs


def test_evaluate_three_of_four():
    net = FixedNet([[0.9, 0.1], [0.2, 0.8], [0.6, 0.4], [0.7, 0.3]])
    acc, confusion = evaluate(net, None, [0, 1, 1, 0])
    assert acc == 0.75
    np.testing.assert_array_equal(confusion, [[2, 0], [1, 1]])


def test_evaluate_empty():
    with pytest.raises(EmptyDatasetError):
        evaluate(FixedNet(np.zeros((0, 2))), None, [])


def test_best_epoch_earliest_on_ties():
    hist = [MetricsRecord(1, 0.1, 1.0, 0.5, 0.5), MetricsRecord(2, 0.1, 0.9, 0.6, 0.75),
            MetricsRecord(3, 0.1, 0.8, 0.7, 0.75), MetricsRecord(4, 0.1, 0.7, 0.8, 0.7)]
    assert best_epoch(hist).epoch == 2
    assert best_epoch([MetricsRecord(1, 0.1, 1.0, 0.5, None)]) is None


# -- gradient checker --------------------------------------------------------

LINEAR = NetworkConfig("linear", (1, 2, 2), [LayerSpec("fc", {"output_size": 2}), LayerSpec("softmax")])


def test_grad_check_linear_net():
    report = grad_check(LINEAR, tolerance=1e-6)
    assert report.passed, report.max_rel_error
    assert set(report.max_rel_error) == {"fc_1.weight", "fc_1.bias"}


def test_grad_check_catches_sign_error(monkeypatch):
    original = layers_mod.Dense.backward

    def flipped(self, dy):
        dx = original(self, dy)
        self.grads["weight"] = -self.grads["weight"]
        return dx

    monkeypatch.setattr(layers_mod.Dense, "backward", flipped)
    report = grad_check(LINEAR)
    assert not report.passed
    assert report.max_rel_error["fc_1.weight"] > 1.0


def test_grad_check_matches_independent_difference():
    """The checker's analytic gradient equals a separate central difference of the loss."""
    from retina_dx.nn import softmax_xent

    net = build_network(LINEAR, rng=Rng(5), dtype=np.float64)
    x = np.random.default_rng(5).standard_normal((3, 1, 2, 2))
    labels = np.array([0, 1, 0])

    def loss():
        net.forward(x, "training")
        return softmax_xent(net.logits, labels)[1]

    net.forward(x, "training")
    grads = net.backward(softmax_xent(net.logits, labels)[2])
    for key, w in net.params.items():
        g = grads[key].copy()
        assert rel_err(g, finite_difference(loss, w)) < 1e-6


def test_grad_check_table1_runs_on_small_input():
    report = grad_check(preset("table1"), (3, 10, 10))
    assert set(report.max_rel_error) == set(build_network(preset("table1", 10)).params)
