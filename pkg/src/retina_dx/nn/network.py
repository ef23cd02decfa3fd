"""Declarative layer configs, the preset architectures and the Network container."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Any

import numpy as np

from ..tensor_core import FLOAT, Rng, ShapeError
from .layers import (
    BatchNorm,
    Conv2D,
    Dense,
    Dropout,
    Layer,
    Pool2D,
    ReLU,
    Softmax,
)


class ConfigError(ValueError):
    pass


_LAYER_TYPES = {
    "conv": Conv2D,
    "batchnorm": BatchNorm,
    "relu": ReLU,
    "maxpool": Pool2D,
    "fc": Dense,
    "dropout": Dropout,
    "softmax": Softmax,
}

_ALLOWED_ARGS = {
    "conv": {"filter_h", "filter_w", "num_filters", "stride", "pad"},
    "batchnorm": {"epsilon"},
    "relu": set(),
    "maxpool": {"pool_h", "pool_w", "stride", "pad", "mode"},
    "fc": {"output_size"},
    "dropout": {"probability"},
    "softmax": set(),
}


@dataclass
class LayerSpec:
    kind: str
    args: dict[str, Any] = field(default_factory=dict)
    name: str | None = None

    def validate(self, index: int) -> None:
        where = f"layer {index} ({self.name or self.kind})"
        if self.kind not in _LAYER_TYPES:
            raise ConfigError(f"{where}: unknown kind {self.kind!r}")
        extra = set(self.args) - _ALLOWED_ARGS[self.kind]
        if extra:
            raise ConfigError(f"{where}: unexpected arguments {sorted(extra)}")
        for key, val in self.args.items():
            if key == "mode":
                if val not in ("max", "mean"):
                    raise ConfigError(f"{where}: pooling mode must be 'max' or 'mean'")
            elif key == "pad":
                if int(val) != val or val < 0:
                    raise ConfigError(f"{where}: pad must be a non-negative integer")
            elif key == "probability":
                if not 0.0 <= val < 1.0:
                    raise ConfigError(f"{where}: dropout probability must lie in [0, 1)")
            elif key == "epsilon":
                if not val > 0:
                    raise ConfigError(f"{where}: epsilon must be positive")
            elif int(val) != val or val < 1:
                raise ConfigError(f"{where}: {key} must be a positive integer, got {val!r}")


@dataclass
class NetworkConfig:
    name: str
    input_shape: tuple[int, int, int]
    layers: list[LayerSpec]
    # preprocessing settings the network was trained with; carried for prediction
    preprocess: dict[str, Any] = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "name": self.name,
            "input_shape": list(self.input_shape),
            "layers": [asdict(s) for s in self.layers],
            "preprocess": dict(self.preprocess),
        }

    @classmethod
    def from_json(cls, blob: dict) -> "NetworkConfig":
        try:
            return cls(
                name=blob["name"],
                input_shape=tuple(int(d) for d in blob["input_shape"]),
                layers=[LayerSpec(kind=s["kind"], args=dict(s.get("args", {})), name=s.get("name"))
                        for s in blob["layers"]],
                preprocess=dict(blob.get("preprocess", {})),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"malformed network config: {exc}") from exc


def _block(filters: int) -> list[LayerSpec]:
    return [
        LayerSpec("conv", {"filter_h": 3, "filter_w": 3, "num_filters": filters, "stride": 1, "pad": 0}),
        LayerSpec("batchnorm", {"epsilon": 1e-5}),
        LayerSpec("relu"),
        LayerSpec("maxpool", {"pool_h": 2, "pool_w": 2, "stride": 2, "pad": 0, "mode": "max"}),
    ]


def _head() -> list[LayerSpec]:
    return [
        LayerSpec("fc", {"output_size": 2}),
        LayerSpec("dropout", {"probability": 0.3}),
        LayerSpec("fc", {"output_size": 2}),
        LayerSpec("softmax"),
    ]


PRESETS = ("table1", "text3")


def preset(name: str, input_size: int = 64, channels: int = 3) -> NetworkConfig:
    """``table1``: two conv blocks (8, 16 filters); ``text3``: a third block of 32 filters."""
    if name == "table1":
        layers = _block(8) + _block(16) + _head()
    elif name == "text3":
        layers = _block(8) + _block(16) + _block(32) + _head()
    else:
        raise ConfigError(f"unknown preset {name!r}; choose from {PRESETS}")
    return NetworkConfig(name, (channels, input_size, input_size), layers)


def _assign_names(specs: list[LayerSpec]) -> list[str]:
    counts: dict[str, int] = {}
    totals: dict[str, int] = {}
    for s in specs:
        totals[s.kind] = totals.get(s.kind, 0) + 1
    names = []
    for s in specs:
        counts[s.kind] = counts.get(s.kind, 0) + 1
        if s.name:
            names.append(s.name)
        elif totals[s.kind] == 1 and s.kind in ("dropout", "softmax"):
            names.append(s.kind)
        else:
            names.append(f"{s.kind}_{counts[s.kind]}")
    if len(set(names)) != len(names):
        raise ConfigError(f"duplicate layer names {names}")
    return names


class Network:
    """Sequential stack ending in softmax. ``forward`` returns class probabilities."""

    def __init__(self, config: NetworkConfig, layers: list[Layer], shapes: list[tuple]):
        self.config = config
        self.layers = layers
        self.shapes = shapes
        self.logits: np.ndarray | None = None

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    @property
    def params(self) -> dict[str, np.ndarray]:
        """Trainable tensors keyed ``<layer>.<param>``."""
        return {f"{l.name}.{k}": l.params[k] for l in self.layers for k in l.param_names}

    def state_dict(self) -> dict[str, np.ndarray]:
        """Every tensor a checkpoint stores: parameters then running statistics, per layer."""
        out = {}
        for l in self.layers:
            for k in l.param_names:
                out[f"{l.name}.{k}"] = l.params[k]
            for k in l.buffer_names:
                out[f"{l.name}.{k}"] = l.buffers[k]
        return out

    def load_state(self, tensors: dict[str, np.ndarray]) -> None:
        expected = self.state_dict()
        if set(tensors) != set(expected):
            raise ShapeError(f"tensor names differ: missing {sorted(set(expected) - set(tensors))}, "
                             f"unexpected {sorted(set(tensors) - set(expected))}")
        for key, ref in expected.items():
            if tensors[key].shape != ref.shape:
                raise ShapeError(f"{key}: stored shape {tensors[key].shape} != expected {ref.shape}")
        for l in self.layers:
            for k in l.param_names:
                l.params[k] = np.array(tensors[f"{l.name}.{k}"])
            for k in l.buffer_names:
                l.buffers[k] = np.array(tensors[f"{l.name}.{k}"])
            if isinstance(l, BatchNorm):
                l.stats_ready = True

    def set_param(self, key: str, value: np.ndarray) -> None:
        layer_name, pname = key.rsplit(".", 1)
        for l in self.layers:
            if l.name == layer_name:
                l.params[pname] = value
                return
        raise KeyError(key)

    def astype(self, dtype) -> "Network":
        for l in self.layers:
            l.params = {k: v.astype(dtype) for k, v in l.params.items()}
            l.buffers = {k: v.astype(dtype) for k, v in l.buffers.items()}
        return self

    def set_dropout_rng(self, rng: Rng) -> None:
        for l in self.layers:
            if isinstance(l, Dropout):
                l.rng = rng

    def forward(self, x: np.ndarray, mode: str = "inference") -> np.ndarray:
        if mode not in ("training", "inference"):
            raise ValueError(f"mode must be 'training' or 'inference', got {mode!r}")
        if tuple(x.shape[1:]) != tuple(self.config.input_shape):
            raise ShapeError(f"input {x.shape} does not match network input {self.config.input_shape}")
        training = mode == "training"
        x = x.astype(self.dtype, copy=False)
        for l in self.layers[:-1]:
            x = l.forward(x, training)
        self.logits = x
        return self.layers[-1].forward(x, training)

    def backward(self, dlogits: np.ndarray) -> dict[str, np.ndarray]:
        """Back-propagate the loss gradient w.r.t. the logits; returns gradients keyed like ``params``."""
        d = dlogits
        for l in reversed(self.layers[:-1]):
            d = l.backward(d)
        return {f"{l.name}.{k}": l.grads[k] for l in self.layers for k in l.param_names}

    def predict(self, x: np.ndarray, batch_size: int = 64) -> np.ndarray:
        parts = [self.forward(x[i:i + batch_size], "inference") for i in range(0, len(x), batch_size)]
        return np.concatenate(parts, axis=0)


def build_network(config: NetworkConfig, input_shape=None, rng: Rng | None = None,
                  dtype=FLOAT) -> Network:
    """Validate the layer stack against ``input_shape`` and initialize parameters.

    Conv and fc weights are He-normal (std ``sqrt(2 / fan_in)``), biases zero,
    batchnorm gamma one and beta zero.
    """
    if input_shape is not None:
        config = NetworkConfig(config.name, tuple(input_shape), config.layers, config.preprocess)
    if rng is None:
        rng = Rng(0)
    specs = config.layers
    if not specs or specs[-1].kind != "softmax":
        raise ConfigError("the final layer must be softmax")
    for i, s in enumerate(specs):
        s.validate(i)
        if s.kind == "softmax" and i != len(specs) - 1:
            raise ConfigError(f"layer {i} (softmax): softmax is only allowed as the final layer")
    if len(config.input_shape) != 3 or min(config.input_shape) < 1:
        raise ConfigError(f"input shape must be C x H x W, got {config.input_shape}")

    names = _assign_names(specs)
    layers: list[Layer] = []
    shapes = [tuple(config.input_shape)]
    shape = shapes[0]
    for i, (s, name) in enumerate(zip(specs, names)):
        layer = _LAYER_TYPES[s.kind](name, **s.args)
        if s.kind in ("conv", "maxpool") and len(shape) != 3:
            raise ConfigError(f"layer {i} ({name}): needs a spatial input, got {shape}")
        try:
            out = layer.output_shape(shape)
        except ShapeError as exc:
            raise ConfigError(f"layer {i} ({name}): {exc}") from exc
        layer.init_params(shape, rng, dtype)
        layers.append(layer)
        shape = out
        shapes.append(shape)
    if shape[0] < 2 or len(shape) != 1:
        raise ConfigError(f"network must end in a class vector, got {shape}")
    return Network(config, layers, shapes)
