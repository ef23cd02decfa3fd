"""Dense tensor helpers shared by every other module.

Tensors are plain ``numpy.ndarray`` objects in NCHW layout. Training runs in
float32; gradient checking runs the same code in float64.

All reductions that feed training go through :func:`matmul` and
:func:`ordered_sum`, which accumulate strictly left to right. ``np.cumsum``
is a sequential scan, so the last element of a cumulative sum is exactly the
naive loop ``s = 0; for v in xs: s += v`` in the array's dtype. That keeps
results bit-reproducible and independent of the BLAS build.

Randomness comes from :class:`Rng`, a thin wrapper over numpy's PCG64 bit
generator keyed by ``SeedSequence([seed, *stream])``.
"""

from __future__ import annotations

import numpy as np

FLOAT = np.float32
FLOAT64 = np.float64

# Rng stream ids derived from one run seed
STREAM_SPLIT = 1
STREAM_INIT = 2
STREAM_SHUFFLE = 3
STREAM_DROPOUT = 4

# upper bound on the temporary (rows x K x N) product held by matmul
_MATMUL_CHUNK = 1 << 22


class ShapeError(ValueError):
    """Raised when tensor shapes do not compose."""


def as_tensor(x, dtype=FLOAT) -> np.ndarray:
    return np.ascontiguousarray(x, dtype=dtype)


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product with fixed summation order over the inner dimension.

    ``out[i, j] = (((a[i,0]*b[0,j]) + a[i,1]*b[1,j]) + ...)`` evaluated in the
    common dtype of ``a`` and ``b``, with no fused multiply-add.
    """
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    m, k = a.shape
    n = b.shape[1]
    dtype = np.result_type(a.dtype, b.dtype)
    out = np.zeros((m, n), dtype=dtype)
    if k == 0 or m == 0 or n == 0:
        return out
    a = a.astype(dtype, copy=False)
    b = b.astype(dtype, copy=False)
    rows = max(1, _MATMUL_CHUNK // (k * n))
    for i0 in range(0, m, rows):
        prod = a[i0:i0 + rows, :, None] * b[None, :, :]
        np.cumsum(prod, axis=1, out=prod)
        out[i0:i0 + rows] = prod[:, -1, :]
    return out


def ordered_sum(x: np.ndarray, axis=None) -> np.ndarray:
    """Sum over ``axis`` (int, tuple or None) in row-major order of the reduced axes."""
    x = np.asarray(x)
    if axis is None:
        axis = tuple(range(x.ndim))
    elif isinstance(axis, int):
        axis = (axis,)
    axis = tuple(a % x.ndim for a in axis)
    keep = [d for d in range(x.ndim) if d not in axis]
    moved = np.transpose(x, keep + list(axis))
    kept_shape = tuple(x.shape[d] for d in keep)
    flat = moved.reshape(kept_shape + (-1,))
    if flat.shape[-1] == 0:
        return np.zeros(kept_shape, dtype=x.dtype)
    return np.cumsum(flat, axis=-1)[..., -1]


def conv_output_size(size: int, kernel: int, stride: int, pad: int) -> int:
    span = size + 2 * pad - kernel
    if span < 0 or span % stride != 0:
        raise ShapeError(
            f"window {kernel} with stride {stride}, pad {pad} does not tile extent {size}"
        )
    return span // stride + 1


def im2col(x: np.ndarray, kh: int, kw: int, stride: int = 1, pad: int = 0) -> np.ndarray:
    """Unfold a single ``C x H x W`` image into ``(C*kh*kw) x (Ho*Wo)`` columns.

    Row index is ``(c, dy, dx)`` row-major, column index is the output position
    ``(oy, ox)`` row-major.
    """
    if x.ndim != 3:
        raise ShapeError(f"im2col expects C x H x W, got {x.shape}")
    return im2col_batch(x[None], kh, kw, stride, pad)


def im2col_batch(x: np.ndarray, kh: int, kw: int, stride: int = 1, pad: int = 0) -> np.ndarray:
    """Batched :func:`im2col`: ``N x C x H x W`` -> ``(C*kh*kw) x (N*Ho*Wo)``."""
    if x.ndim != 4:
        raise ShapeError(f"im2col_batch expects N x C x H x W, got {x.shape}")
    n, c, h, w = x.shape
    ho = conv_output_size(h, kh, stride, pad)
    wo = conv_output_size(w, kw, stride, pad)
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    cols = np.empty((c, kh, kw, n, ho, wo), dtype=x.dtype)
    for dy in range(kh):
        y_end = dy + stride * ho
        for dx in range(kw):
            x_end = dx + stride * wo
            cols[:, dy, dx] = x[:, :, dy:y_end:stride, dx:x_end:stride].transpose(1, 0, 2, 3)
    return cols.reshape(c * kh * kw, n * ho * wo)


def col2im_batch(cols: np.ndarray, input_shape, kh: int, kw: int,
                 stride: int = 1, pad: int = 0) -> np.ndarray:
    """Adjoint of :func:`im2col_batch`: scatter-add columns back to ``N x C x H x W``."""
    n, c, h, w = input_shape
    ho = conv_output_size(h, kh, stride, pad)
    wo = conv_output_size(w, kw, stride, pad)
    if cols.shape != (c * kh * kw, n * ho * wo):
        raise ShapeError(f"col2im: columns {cols.shape} do not match input {tuple(input_shape)}")
    cols = cols.reshape(c, kh, kw, n, ho, wo)
    out = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    for dy in range(kh):
        y_end = dy + stride * ho
        for dx in range(kw):
            x_end = dx + stride * wo
            out[:, :, dy:y_end:stride, dx:x_end:stride] += cols[:, dy, dx].transpose(1, 0, 2, 3)
    if pad:
        out = out[:, :, pad:pad + h, pad:pad + w]
    return np.ascontiguousarray(out)


def col2im(cols: np.ndarray, input_shape, kh: int, kw: int,
           stride: int = 1, pad: int = 0) -> np.ndarray:
    c, h, w = input_shape
    return col2im_batch(cols, (1, c, h, w), kh, kw, stride, pad)[0]


class Rng:
    """Deterministic generator: numpy PCG64 seeded from ``SeedSequence([seed, *stream])``.

    ``stream`` lets independent consumers (weight init, per-epoch shuffles,
    dropout masks, dataset splits) draw from non-overlapping sequences of the
    same run seed.
    """

    def __init__(self, seed: int, *stream: int):
        if seed < 0 or seed >= 2 ** 64:
            raise ValueError(f"seed must be a 64-bit unsigned integer, got {seed}")
        self.seed = int(seed)
        self.stream = tuple(int(s) for s in stream)
        self._gen = np.random.Generator(
            np.random.PCG64(np.random.SeedSequence([self.seed, *self.stream]))
        )

    def child(self, *stream: int) -> "Rng":
        return Rng(self.seed, *self.stream, *stream)

    def below(self, bound: int) -> int:
        """One uniform draw from ``0..bound-1``."""
        return int(self._gen.integers(0, bound))

    def uniform(self, shape=None, dtype=FLOAT64):
        return self._gen.random(shape, dtype=dtype)

    def normal(self, shape, std: float = 1.0, dtype=FLOAT64) -> np.ndarray:
        return (self._gen.standard_normal(shape, dtype=FLOAT64) * std).astype(dtype)


def rng_shuffle(rng: Rng, n: int) -> list[int]:
    """Fisher-Yates permutation of ``0..n-1``; consumes exactly ``max(n-1, 0)`` draws."""
    if n < 0:
        raise ValueError("n must be non-negative")
    perm = list(range(n))
    for i in range(n - 1, 0, -1):
        j = rng.below(i + 1)
        perm[i], perm[j] = perm[j], perm[i]
    return perm
