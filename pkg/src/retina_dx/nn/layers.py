"""Layers with hand-written forward and backward passes.

Every layer keeps whatever its backward pass needs from the most recent
forward call, so a layer instance must not be shared between concurrent
forward/backward sequences.
"""

from __future__ import annotations

import numpy as np

from ..tensor_core import (
    Rng,
    ShapeError,
    col2im_batch,
    conv_output_size,
    im2col_batch,
    matmul,
    ordered_sum,
)


class LayerStateError(RuntimeError):
    """Backward called without a matching forward (or inference without statistics)."""


class Layer:
    kind = "layer"
    # trainable parameter names, in checkpoint order
    param_names: tuple[str, ...] = ()
    # non-trainable state saved alongside the parameters
    buffer_names: tuple[str, ...] = ()

    def __init__(self, name: str):
        self.name = name
        self.params: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}

    def output_shape(self, in_shape: tuple[int, ...]) -> tuple[int, ...]:
        return in_shape

    def init_params(self, in_shape, rng: Rng, dtype) -> None:
        pass

    def forward(self, x: np.ndarray, training: bool) -> np.ndarray:
        raise NotImplementedError

    def backward(self, dy: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def _need(self, cache):
        if cache is None:
            raise LayerStateError(f"{self.name}: backward called before forward")
        return cache


def conv2d_forward(x, kernels, biases, stride=1, pad=0):
    """Cross-correlation of ``N x Cin x H x W`` with ``Cout x Cin x kh x kw`` kernels.

    Returns the output and the im2col matrix used to compute it.
    """
    if x.ndim != 4 or kernels.ndim != 4 or x.shape[1] != kernels.shape[1]:
        raise ShapeError(f"conv2d: input {x.shape} incompatible with kernels {kernels.shape}")
    n, _, h, w = x.shape
    cout, _, kh, kw = kernels.shape
    ho = conv_output_size(h, kh, stride, pad)
    wo = conv_output_size(w, kw, stride, pad)
    cols = im2col_batch(x, kh, kw, stride, pad)
    out = matmul(kernels.reshape(cout, -1), cols) + biases[:, None]
    return out.reshape(cout, n, ho, wo).transpose(1, 0, 2, 3).copy(), cols


def conv2d_backward(dy, x_shape, cols, kernels, stride=1, pad=0):
    cout, _, kh, kw = kernels.shape
    dy2 = dy.transpose(1, 0, 2, 3).reshape(cout, -1)
    dkernels = matmul(dy2, cols.T).reshape(kernels.shape)
    dbiases = ordered_sum(dy2, axis=1)
    dcols = matmul(kernels.reshape(cout, -1).T, dy2)
    dx = col2im_batch(dcols, x_shape, kh, kw, stride, pad)
    return dx, dkernels, dbiases


class Conv2D(Layer):
    kind = "conv"
    param_names = ("weight", "bias")

    def __init__(self, name, filter_h=3, filter_w=3, num_filters=8, stride=1, pad=0):
        super().__init__(name)
        self.filter_h, self.filter_w = filter_h, filter_w
        self.num_filters, self.stride, self.pad = num_filters, stride, pad
        self._cache = None

    def output_shape(self, in_shape):
        if len(in_shape) != 3:
            raise ShapeError(f"{self.name}: expects C x H x W input, got {in_shape}")
        _, h, w = in_shape
        return (self.num_filters,
                conv_output_size(h, self.filter_h, self.stride, self.pad),
                conv_output_size(w, self.filter_w, self.stride, self.pad))

    def init_params(self, in_shape, rng, dtype):
        cin = in_shape[0]
        fan_in = cin * self.filter_h * self.filter_w
        shape = (self.num_filters, cin, self.filter_h, self.filter_w)
        self.params["weight"] = rng.normal(shape, std=np.sqrt(2.0 / fan_in), dtype=dtype)
        self.params["bias"] = np.zeros(self.num_filters, dtype=dtype)

    def forward(self, x, training):
        y, cols = conv2d_forward(x, self.params["weight"], self.params["bias"], self.stride, self.pad)
        self._cache = (x.shape, cols)
        return y

    def backward(self, dy):
        x_shape, cols = self._need(self._cache)
        dx, dw, db = conv2d_backward(dy, x_shape, cols, self.params["weight"], self.stride, self.pad)
        self.grads = {"weight": dw, "bias": db}
        return dx


class BatchNorm(Layer):
    """Per-channel batch normalization over (N, H, W); running statistics use momentum 0.9."""

    kind = "batchnorm"
    param_names = ("gamma", "beta")
    buffer_names = ("running_mean", "running_var")
    momentum = 0.9

    def __init__(self, name, epsilon=1e-5):
        super().__init__(name)
        if epsilon <= 0:
            raise ValueError("batchnorm epsilon must be positive")
        self.epsilon = epsilon
        self.stats_ready = False
        self._cache = None

    def init_params(self, in_shape, rng, dtype):
        c = in_shape[0]
        self.params["gamma"] = np.ones(c, dtype=dtype)
        self.params["beta"] = np.zeros(c, dtype=dtype)
        self.buffers["running_mean"] = np.zeros(c, dtype=dtype)
        self.buffers["running_var"] = np.ones(c, dtype=dtype)

    def forward(self, x, training):
        gamma, beta = self.params["gamma"], self.params["beta"]
        shape = (1, -1) + (1,) * (x.ndim - 2)
        axes = (0,) + tuple(range(2, x.ndim))
        if training:
            count = x.size // x.shape[1]
            if count < 2:
                raise ShapeError(f"{self.name}: need at least 2 values per channel in training mode")
            mean = ordered_sum(x, axes) / x.dtype.type(count)
            xc = x - mean.reshape(shape)
            var = ordered_sum(xc * xc, axes) / x.dtype.type(count)
            m = x.dtype.type(self.momentum)
            self.buffers["running_mean"] = (m * self.buffers["running_mean"] + (1 - m) * mean).astype(x.dtype)
            self.buffers["running_var"] = (m * self.buffers["running_var"] + (1 - m) * var).astype(x.dtype)
            self.stats_ready = True
        else:
            if not self.stats_ready:
                raise LayerStateError(f"{self.name}: inference requested before running statistics exist")
            mean = self.buffers["running_mean"]
            var = self.buffers["running_var"]
            xc = x - mean.reshape(shape)
        inv_std = (1.0 / np.sqrt(var + x.dtype.type(self.epsilon))).astype(x.dtype)
        xhat = xc * inv_std.reshape(shape)
        self._cache = (xhat, inv_std, axes, shape) if training else None
        return gamma.reshape(shape) * xhat + beta.reshape(shape)

    def backward(self, dy):
        xhat, inv_std, axes, shape = self._need(self._cache)
        gamma = self.params["gamma"]
        count = dy.dtype.type(dy.size // dy.shape[1])
        dbeta = ordered_sum(dy, axes)
        dgamma = ordered_sum(dy * xhat, axes)
        self.grads = {"gamma": dgamma, "beta": dbeta}
        # dx = gamma*inv_std/M * (M*dy - sum(dy) - xhat*sum(dy*xhat))
        dx = (gamma * inv_std / count).reshape(shape) * (
            count * dy - dbeta.reshape(shape) - xhat * dgamma.reshape(shape))
        return dx


class ReLU(Layer):
    kind = "relu"

    def __init__(self, name):
        super().__init__(name)
        self._mask = None

    def forward(self, x, training):
        self._mask = x > 0
        return np.where(self._mask, x, x.dtype.type(0))

    def backward(self, dy):
        mask = self._need(self._mask)
        return np.where(mask, dy, dy.dtype.type(0))


class Pool2D(Layer):
    """Max or mean pooling. Output size uses floor division, as for a valid window scan."""

    kind = "maxpool"

    def __init__(self, name, pool_h=2, pool_w=2, stride=2, pad=0, mode="max"):
        super().__init__(name)
        if mode not in ("max", "mean"):
            raise ValueError(f"unknown pooling mode {mode!r}")
        self.pool_h, self.pool_w, self.stride, self.pad, self.mode = pool_h, pool_w, stride, pad, mode
        self._cache = None

    def _out(self, size, k):
        span = size + 2 * self.pad - k
        if span < 0:
            raise ShapeError(f"{self.name}: pool {k} larger than padded extent {size + 2 * self.pad}")
        return span // self.stride + 1

    def output_shape(self, in_shape):
        if len(in_shape) != 3:
            raise ShapeError(f"{self.name}: expects C x H x W input, got {in_shape}")
        c, h, w = in_shape
        return (c, self._out(h, self.pool_h), self._out(w, self.pool_w))

    def _windows(self, x):
        n, c, h, w = x.shape
        ho, wo = self._out(h, self.pool_h), self._out(w, self.pool_w)
        if self.pad:
            fill = -np.inf if self.mode == "max" else 0.0
            x = np.pad(x, ((0, 0), (0, 0), (self.pad,) * 2, (self.pad,) * 2), constant_values=fill)
        s = self.stride
        win = np.empty((n, c, ho, wo, self.pool_h * self.pool_w), dtype=x.dtype)
        for dy in range(self.pool_h):
            for dx in range(self.pool_w):
                win[..., dy * self.pool_w + dx] = x[:, :, dy:dy + s * ho:s, dx:dx + s * wo:s]
        return win

    def forward(self, x, training):
        win = self._windows(x)
        if self.mode == "max":
            arg = np.argmax(win, axis=-1)
            y = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
        else:
            arg = None
            y = ordered_sum(win, axis=-1) / x.dtype.type(win.shape[-1])
        self._cache = (x.shape, arg)
        return y

    def backward(self, dy):
        x_shape, arg = self._need(self._cache)
        n, c, h, w = x_shape
        ho, wo = dy.shape[2], dy.shape[3]
        s, p = self.stride, self.pad
        dx = np.zeros((n, c, h + 2 * p, w + 2 * p), dtype=dy.dtype)
        size = self.pool_h * self.pool_w
        for dyy in range(self.pool_h):
            for dxx in range(self.pool_w):
                k = dyy * self.pool_w + dxx
                if self.mode == "max":
                    contrib = np.where(arg == k, dy, dy.dtype.type(0))
                else:
                    contrib = dy / dy.dtype.type(size)
                dx[:, :, dyy:dyy + s * ho:s, dxx:dxx + s * wo:s] += contrib
        if p:
            dx = dx[:, :, p:p + h, p:p + w]
        return np.ascontiguousarray(dx)


def fc_forward(x2, weight, bias):
    return matmul(x2, weight.T) + bias


class Dense(Layer):
    """Fully connected layer; flattens all non-batch dimensions of its input."""

    kind = "fc"
    param_names = ("weight", "bias")

    def __init__(self, name, output_size=2):
        super().__init__(name)
        self.output_size = output_size
        self._cache = None

    def output_shape(self, in_shape):
        return (self.output_size,)

    def init_params(self, in_shape, rng, dtype):
        fan_in = int(np.prod(in_shape))
        self.params["weight"] = rng.normal((self.output_size, fan_in), std=np.sqrt(2.0 / fan_in), dtype=dtype)
        self.params["bias"] = np.zeros(self.output_size, dtype=dtype)

    def forward(self, x, training):
        x2 = x.reshape(x.shape[0], -1)
        if x2.shape[1] != self.params["weight"].shape[1]:
            raise ShapeError(f"{self.name}: input {x.shape} does not flatten to {self.params['weight'].shape[1]}")
        self._cache = (x.shape, x2)
        return fc_forward(x2, self.params["weight"], self.params["bias"])

    def backward(self, dy):
        x_shape, x2 = self._need(self._cache)
        self.grads = {"weight": matmul(dy.T, x2), "bias": ordered_sum(dy, axis=0)}
        return matmul(dy, self.params["weight"]).reshape(x_shape)


class Dropout(Layer):
    """Inverted dropout: training scales kept units by 1/(1-p); inference is the identity."""

    kind = "dropout"

    def __init__(self, name, probability=0.3):
        super().__init__(name)
        if not 0.0 <= probability < 1.0:
            raise ValueError("dropout probability must lie in [0, 1)")
        self.probability = probability
        self.rng = Rng(0)
        self._scale = None

    def forward(self, x, training):
        if not training or self.probability == 0.0:
            self._scale = np.ones_like(x)
            return x
        keep = self.rng.uniform(x.shape) >= self.probability
        self._scale = keep.astype(x.dtype) / x.dtype.type(1.0 - self.probability)
        return x * self._scale

    def backward(self, dy):
        return dy * self._need(self._scale)


class Softmax(Layer):
    kind = "softmax"

    def forward(self, x, training):
        return softmax(x)

    def backward(self, dy):
        # the loss gradient handed to Network.backward is already taken w.r.t. the logits
        return dy


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / ordered_sum(e, axis=1)[:, None]


def softmax_xent(logits: np.ndarray, labels):
    """Softmax probabilities, mean cross-entropy, and its gradient w.r.t. the logits."""
    labels = np.asarray(labels, dtype=np.int64)
    n, c = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"labels shape {labels.shape} does not match batch of {n}")
    if np.any(labels < 0) or np.any(labels >= c):
        raise ValueError(f"labels must lie in [0, {c}), got {labels.tolist()}")
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    total = ordered_sum(e, axis=1)
    probs = e / total[:, None]
    rows = np.arange(n)
    # log p[label] computed from the shifted logits so saturated rows stay finite
    nll = np.log(total) - z[rows, labels]
    loss = float(ordered_sum(nll)) / n
    dlogits = probs.copy()
    dlogits[rows, labels] -= 1
    dlogits /= logits.dtype.type(n)
    return probs, loss, dlogits
