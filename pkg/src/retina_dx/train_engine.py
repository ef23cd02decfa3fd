"""SGD-with-momentum training, the piecewise learning-rate schedule, evaluation
and the finite-difference gradient checker."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .data_pipeline import make_batches
from .nn.layers import softmax_xent
from .nn.network import Network, NetworkConfig, build_network
from .tensor_core import FLOAT64, STREAM_DROPOUT, STREAM_INIT, STREAM_SHUFFLE, Rng, rng_shuffle


@dataclass
class TrainingConfig:
    initial_lr: float = 0.01
    lr_drop_factor: float = 0.2
    lr_drop_period_epochs: int = 5
    max_epochs: int = 20
    momentum: float = 0.9
    batch_size: int = 32
    seed: int = 0
    shuffle_each_epoch: bool = True

    def __post_init__(self):
        if not 0.0 < self.lr_drop_factor <= 1.0:
            raise ValueError("lr_drop_factor must lie in (0, 1]")
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be at least 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if self.lr_drop_period_epochs < 1:
            raise ValueError("lr_drop_period_epochs must be at least 1")
        if self.initial_lr <= 0:
            raise ValueError("initial_lr must be positive")
        if not 0 <= self.seed < 2 ** 64:
            raise ValueError("seed must be a 64-bit unsigned integer")


@dataclass
class MetricsRecord:
    epoch: int
    lr: float
    train_loss: float
    train_accuracy: float
    val_accuracy: float | None


@dataclass
class OptimizerState:
    velocity: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def zeros_like(cls, params: dict[str, np.ndarray]) -> "OptimizerState":
        return cls({k: np.zeros_like(v) for k, v in params.items()})


def lr_for_epoch(cfg: TrainingConfig, epoch: int) -> float:
    """``initial_lr * drop_factor ** floor((epoch - 1) / period)`` for a 1-based epoch."""
    if not 1 <= epoch <= cfg.max_epochs:
        raise ValueError(f"epoch {epoch} outside 1..{cfg.max_epochs}")
    return cfg.initial_lr * cfg.lr_drop_factor ** ((epoch - 1) // cfg.lr_drop_period_epochs)


def sgdm_step(params, grads, state: OptimizerState, lr: float, momentum: float):
    """In-place ``v <- momentum*v - lr*g; w <- w + v`` for every parameter."""
    if not (set(params) == set(grads) == set(state.velocity)):
        raise KeyError("params, grads and optimizer state must share one key set")
    for key, w in params.items():
        g, v = grads[key], state.velocity[key]
        if not (w.shape == g.shape == v.shape):
            raise ValueError(f"{key}: shapes differ (param {w.shape}, grad {g.shape}, velocity {v.shape})")
        dt = w.dtype.type
        v *= dt(momentum)
        v -= dt(lr) * g.astype(w.dtype, copy=False)
        w += v
    return params, state


class EmptyDatasetError(ValueError):
    pass


def evaluate(net: Network, x: np.ndarray, y, num_classes: int = 2):
    """Inference-mode accuracy and confusion matrix (rows true class, columns predicted)."""
    y = np.asarray(y, dtype=np.int64)
    if len(y) == 0:
        raise EmptyDatasetError("cannot evaluate on an empty dataset")
    pred = np.argmax(net.predict(x), axis=1)
    confusion = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(confusion, (y, pred), 1)
    return int(np.trace(confusion)) / len(y), confusion


def train(net: Network, train_set, val_set, cfg: TrainingConfig,
          on_epoch_end: Callable[[MetricsRecord, Network], None] | None = None):
    """Run ``cfg.max_epochs`` epochs of mini-batch SGDM.

    ``train_set`` and ``val_set`` are ``(x, y)`` pairs; ``val_set`` may be
    empty or None, in which case ``val_accuracy`` is recorded as None.
    ``train_accuracy`` is the inference-mode accuracy on the training set
    after the epoch; ``train_loss`` is the sample-weighted mean loss of the
    epoch's mini-batches.
    """
    x_train, y_train = train_set
    y_train = np.asarray(y_train, dtype=np.int64)
    n = len(y_train)
    if n == 0:
        raise EmptyDatasetError("training set is empty")
    has_val = val_set is not None and len(val_set[1]) > 0
    params = net.params
    state = OptimizerState.zeros_like(params)
    net.set_dropout_rng(Rng(cfg.seed, STREAM_DROPOUT))
    history: list[MetricsRecord] = []
    for epoch in range(1, cfg.max_epochs + 1):
        lr = lr_for_epoch(cfg, epoch)
        if cfg.shuffle_each_epoch:
            order = rng_shuffle(Rng(cfg.seed, STREAM_SHUFFLE, epoch), n)
        else:
            order = list(range(n))
        loss_sum = 0.0
        for batch in make_batches(order, cfg.batch_size):
            net.forward(x_train[batch], "training")
            _, loss, dlogits = softmax_xent(net.logits, y_train[batch])
            grads = net.backward(dlogits)
            sgdm_step(params, grads, state, lr, cfg.momentum)
            loss_sum += loss * len(batch)
        train_acc, _ = evaluate(net, x_train, y_train)
        val_acc = evaluate(net, *val_set)[0] if has_val else None
        record = MetricsRecord(epoch, lr, loss_sum / n, train_acc, val_acc)
        history.append(record)
        if on_epoch_end is not None:
            on_epoch_end(record, net)
    return net, history


@dataclass
class GradCheckReport:
    tolerance: float
    max_rel_error: dict[str, float]
    max_abs_error: dict[str, float] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(err < self.tolerance for err in self.max_rel_error.values())

    @property
    def worst(self) -> float:
        return max(self.max_rel_error.values())


def relative_error(analytic, numeric) -> np.ndarray:
    analytic = np.asarray(analytic, dtype=FLOAT64)
    numeric = np.asarray(numeric, dtype=FLOAT64)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return np.abs(analytic - numeric) / denom


def numeric_gradient(f: Callable[[], float], w: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences of ``f`` w.r.t. ``w``, perturbing ``w`` in place."""
    grad = np.zeros_like(w, dtype=FLOAT64)
    flat = w.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = f()
        flat[i] = old - h
        down = f()
        flat[i] = old
        gflat[i] = (up - down) / (2 * h)
    return grad


def grad_check(config: NetworkConfig, input_shape=None, tolerance: float = 1e-3,
               seed: int = 0, batch: int = 4, h: float = 1e-5) -> GradCheckReport:
    """Compare full-network backprop against central differences in float64.

    Dropout masks are held fixed by re-seeding the dropout generator before
    every forward pass, so the loss is a deterministic function of the weights.
    """
    rng = Rng(seed)
    net = build_network(config, input_shape, rng.child(STREAM_INIT), dtype=FLOAT64)
    shape = net.config.input_shape
    x = rng.child(10).uniform((batch,) + tuple(shape)) * 2.0 - 1.0
    n_classes = net.shapes[-1][0]
    labels = np.arange(batch) % n_classes

    def loss_and_grads():
        net.set_dropout_rng(Rng(seed, STREAM_DROPOUT))
        net.forward(x, "training")
        _, loss, dlogits = softmax_xent(net.logits, labels)
        return loss, dlogits

    _, dlogits = loss_and_grads()
    analytic = {k: v.copy() for k, v in net.backward(dlogits).items()}
    rel, absolute = {}, {}
    for key, w in net.params.items():
        numeric = numeric_gradient(lambda: loss_and_grads()[0], w, h)
        rel[key] = float(relative_error(analytic[key], numeric).max())
        absolute[key] = float(np.abs(analytic[key] - numeric).max())
    return GradCheckReport(tolerance, rel, absolute)


def best_epoch(history: list[MetricsRecord]) -> MetricsRecord | None:
    """Highest validation accuracy, earliest epoch on ties."""
    best = None
    for rec in history:
        if rec.val_accuracy is None or math.isnan(rec.val_accuracy):
            continue
        if best is None or rec.val_accuracy > best.val_accuracy:
            best = rec
    return best
