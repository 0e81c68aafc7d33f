"""Dense NCHW numeric kernels.

Tensors are plain ``numpy.ndarray`` values in row-major (C) order.  Every
kernel is a pure function; backward helpers live next to their forward
counterparts so the tape can stay agnostic of the math.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, DimensionError

DTYPES = {"f32": np.float32, "f64": np.float64, "u32": np.uint32}

POOL_MODES = ("strict", "floor", "ceil")


def as_tensor(data, dtype=np.float32) -> np.ndarray:
    """Copy ``data`` into a C-contiguous array, rejecting zero extents."""
    arr = np.ascontiguousarray(np.asarray(data, dtype=dtype))
    if arr.ndim and min(arr.shape) < 1:
        raise DimensionError(f"all extents must be >= 1, got shape {arr.shape}")
    return arr


def nbytes(shape, dtype) -> int:
    return int(np.prod(shape, dtype=np.int64)) * np.dtype(dtype).itemsize


def _require_rank(x: np.ndarray, rank: int, name: str) -> None:
    if x.ndim != rank:
        raise DimensionError(f"{name}: expected rank {rank}, got shape {x.shape}")


# ---------------------------------------------------------------------------
# convolution


def conv_output_extent(size: int, k: int, stride: int, padding: int, exact: bool = False) -> int:
    """Output extent with floor semantics; ``exact`` rejects a non-integral quotient."""
    if stride < 1 or padding < 0:
        raise ConfigError(f"stride must be >= 1 and padding >= 0 (got {stride}, {padding})")
    span = size + 2 * padding - k
    if span < 0 or (exact and span % stride):
        raise ConfigError(
            f"non-integral or empty output extent: ({size} + 2*{padding} - {k}) / {stride} + 1"
        )
    return span // stride + 1


def _windows(x: np.ndarray, kh: int, kw: int, stride: int, padding: int) -> np.ndarray:
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))
    return win[:, :, ::stride, ::stride]  # (n, c, ho, wo, kh, kw)


def conv2d(x, weight, bias=None, stride: int = 1, padding: int = 0, exact: bool = False):
    """Cross-correlation of ``x[n,c_in,h,w]`` with ``weight[c_out,c_in,kh,kw]``.

    Trailing rows/cols that do not fill a full stride are dropped (floor
    semantics) unless ``exact`` is set, in which case they raise.
    """
    _require_rank(x, 4, "conv2d input")
    _require_rank(weight, 4, "conv2d weight")
    n, c_in, h, w = x.shape
    c_out, wc_in, kh, kw = weight.shape
    if wc_in != c_in:
        raise DimensionError(f"conv2d: input has {c_in} channels, weight expects {wc_in}")
    ho = conv_output_extent(h, kh, stride, padding, exact)
    wo = conv_output_extent(w, kw, stride, padding, exact)
    win = _windows(x, kh, kw, stride, padding)
    out = np.tensordot(win, weight, axes=([1, 4, 5], [1, 2, 3]))  # (n, ho, wo, c_out)
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))
    if bias is not None:
        if bias.shape != (c_out,):
            raise DimensionError(f"conv2d: bias shape {bias.shape} != ({c_out},)")
        out += bias.reshape(1, c_out, 1, 1)
    assert out.shape == (n, c_out, ho, wo)
    return out


def conv2d_grad_weight(x, grad_out, kh: int, kw: int, stride: int = 1, padding: int = 0):
    win = _windows(x, kh, kw, stride, padding)
    return np.ascontiguousarray(np.tensordot(grad_out, win, axes=([0, 2, 3], [0, 2, 3])))


def conv2d_grad_input(grad_out, weight, in_shape, stride: int = 1, padding: int = 0):
    n, c_in, h, w = in_shape
    _, _, kh, kw = weight.shape
    _, _, ho, wo = grad_out.shape
    cols = np.tensordot(grad_out, weight, axes=([1], [0]))  # (n, ho, wo, c_in, kh, kw)
    cols = cols.transpose(0, 3, 4, 5, 1, 2)
    gx = np.zeros((n, c_in, h + 2 * padding, w + 2 * padding), dtype=grad_out.dtype)
    for i in range(kh):
        for j in range(kw):
            gx[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += cols[:, :, i, j]
    if padding:
        gx = gx[:, :, padding:-padding, padding:-padding]
    return np.ascontiguousarray(gx)


# ---------------------------------------------------------------------------
# pooling / resampling


def avgpool2d(x, k: int = 2, mode: str = "strict") -> np.ndarray:
    """Non-overlapping ``k x k`` mean pooling.

    ``mode`` controls extents not divisible by ``k``: ``strict`` raises,
    ``floor`` drops the remainder, ``ceil`` averages the partial edge windows
    over their valid elements only.
    """
    _require_rank(x, 4, "avgpool2d input")
    if mode not in POOL_MODES:
        raise ConfigError(f"unknown pooling mode {mode!r}")
    n, c, h, w = x.shape
    if h % k or w % k:
        if mode == "strict":
            raise ConfigError(f"avgpool2d: extent {h}x{w} not divisible by {k}")
        if mode == "floor":
            x = x[:, :, : h - h % k, : w - w % k]
        else:
            sums = _ceil_pad(x, k).reshape(n, c, -(-h // k), k, -(-w // k), k).sum(axis=(3, 5))
            return sums / _ceil_counts(h, w, k, x.dtype)
    n, c, h, w = x.shape
    return x.reshape(n, c, h // k, k, w // k, k).mean(axis=(3, 5))


def _ceil_pad(x, k):
    h, w = x.shape[2:]
    return np.pad(x, ((0, 0), (0, 0), (0, -h % k), (0, -w % k)))


def _ceil_counts(h, w, k, dtype):
    rows = np.minimum(k, h - k * np.arange(-(-h // k)))
    cols = np.minimum(k, w - k * np.arange(-(-w // k)))
    return np.outer(rows, cols).astype(dtype)


def avgpool2d_grad(grad_out, in_shape, k: int = 2, mode: str = "strict"):
    n, c, h, w = in_shape
    if (h % k or w % k) and mode == "ceil":
        g = grad_out / _ceil_counts(h, w, k, grad_out.dtype)
        g = np.repeat(np.repeat(g, k, axis=2), k, axis=3)
        return np.ascontiguousarray(g[:, :, :h, :w])
    g = np.repeat(np.repeat(grad_out / (k * k), k, axis=2), k, axis=3)
    if g.shape[2:] != (h, w):  # floor mode: dropped rows/cols get no gradient
        full = np.zeros(in_shape, dtype=grad_out.dtype)
        full[:, :, : g.shape[2], : g.shape[3]] = g
        g = full
    return np.ascontiguousarray(g)


def global_avgpool(x) -> np.ndarray:
    _require_rank(x, 4, "global_avgpool input")
    return x.mean(axis=(2, 3), keepdims=True)


def global_avgpool_grad(grad_out, in_shape):
    h, w = in_shape[2:]
    return np.ascontiguousarray(np.broadcast_to(grad_out / (h * w), in_shape))


def upsample_nearest2x(x, out_hw: tuple[int, int] | None = None) -> np.ndarray:
    """Replicate each element into a 2x2 block, optionally cropping to ``out_hw``."""
    _require_rank(x, 4, "upsample input")
    y = np.repeat(np.repeat(x, 2, axis=2), 2, axis=3)
    if out_hw is not None:
        y = y[:, :, : out_hw[0], : out_hw[1]]
    return np.ascontiguousarray(y)


def upsample_nearest2x_grad(grad_out, in_shape):
    n, c, h, w = in_shape
    g = grad_out
    if g.shape[2:] != (2 * h, 2 * w):
        g = np.pad(g, ((0, 0), (0, 0), (0, 2 * h - g.shape[2]), (0, 2 * w - g.shape[3])))
    return g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5))


# ---------------------------------------------------------------------------
# dense / elementwise


def matmul_bias(x, weight, bias=None) -> np.ndarray:
    """Affine map ``x @ weight + bias`` with ``weight[c_in, c_out]``."""
    _require_rank(x, 2, "matmul input")
    _require_rank(weight, 2, "matmul weight")
    if x.shape[1] != weight.shape[0]:
        raise DimensionError(f"matmul: inner extents {x.shape[1]} != {weight.shape[0]}")
    out = x @ weight
    if bias is not None:
        if bias.shape != (weight.shape[1],):
            raise DimensionError(f"matmul: bias shape {bias.shape} != ({weight.shape[1]},)")
        out = out + bias
    return out


def _same_shape(a, b, name):
    if a.shape != b.shape:
        raise DimensionError(f"{name}: shapes {a.shape} and {b.shape} differ")


def add(a, b):
    _same_shape(a, b, "add")
    return a + b


def sub(a, b):
    _same_shape(a, b, "sub")
    return a - b


def mul(a, b):
    """Elementwise product; ``b`` may broadcast over axis 1 when it has one channel."""
    if a.shape != b.shape:
        if not (a.ndim == b.ndim == 4 and b.shape[1] == 1 and a.shape[::2] == b.shape[::2]
                and a.shape[3] == b.shape[3]):
            raise DimensionError(f"mul: cannot broadcast {b.shape} onto {a.shape}")
    return a * b


def scale(a, alpha: float):
    return a * a.dtype.type(alpha)


def relu(x):
    return np.maximum(x, 0)


def sigmoid(x):
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def log_softmax(logits):
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def cross_entropy_with_logits(logits, labels) -> tuple[float, np.ndarray]:
    """Mean negative log-likelihood and its gradient w.r.t. ``logits``."""
    _require_rank(logits, 2, "cross_entropy logits")
    labels = np.asarray(labels, dtype=np.int64)
    n = logits.shape[0]
    if labels.shape != (n,):
        raise DimensionError(f"labels shape {labels.shape} != ({n},)")
    logp = log_softmax(logits)
    loss = -logp[np.arange(n), labels].mean()
    grad = np.exp(logp)
    grad[np.arange(n), labels] -= 1
    return float(loss), grad / n


def batchnorm_stats(x) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel mean and biased variance over (n, h, w)."""
    _require_rank(x, 4, "batchnorm input")
    return x.mean(axis=(0, 2, 3)), x.var(axis=(0, 2, 3))


def _chan(v):
    return v.reshape(1, -1, 1, 1)


def batchnorm2d(x, gamma, beta, mean, var, eps: float = 1e-5):
    """Normalize with the given statistics and apply the affine transform."""
    c = x.shape[1]
    for name, v in (("gamma", gamma), ("beta", beta), ("mean", mean), ("var", var)):
        if v.shape != (c,):
            raise DimensionError(f"batchnorm {name} shape {v.shape} != ({c},)")
    inv = 1.0 / np.sqrt(var + eps)
    return (x - _chan(mean)) * _chan(gamma * inv) + _chan(beta)
