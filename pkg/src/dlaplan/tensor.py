"""Dense NCHW operations with hand-written forward and backward passes.

Feature maps are plain ``numpy.ndarray`` objects in NCHW layout. Every
differentiable op comes as a forward function plus a matching ``*_backward``
that maps an upstream gradient to gradients of the op's inputs.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from ._config import get_dtype


class ShapeError(ValueError):
    """Raised when tensor dimensions are incompatible with an operation."""


def _as_float(a):
    a = np.asarray(a)
    if a.dtype not in (np.float32, np.float64):
        a = a.astype(get_dtype())
    return a


@dataclass
class ConvKernel:
    weights: np.ndarray  # (out_channels, in_channels, kh, kw)
    bias: np.ndarray
    padding: tuple = (0, 0)
    stride: int = 1

    def __post_init__(self):
        self.weights = _as_float(self.weights)
        self.bias = _as_float(self.bias).reshape(-1)
        if self.weights.ndim != 4:
            raise ShapeError(f"kernel weights must be 4-d, got shape {self.weights.shape}")
        kh, kw = self.weights.shape[2:]
        if kh % 2 == 0 or kw % 2 == 0:
            raise ShapeError(f"kernel spatial dims must be odd, got {kh}x{kw}")
        if self.bias.shape[0] != self.weights.shape[0]:
            raise ShapeError(
                f"bias length {self.bias.shape[0]} != out_channels {self.weights.shape[0]}")
        self.padding = (int(self.padding[0]), int(self.padding[1]))
        if min(self.padding) < 0:
            raise ShapeError(f"negative padding {self.padding}")
        self.stride = int(self.stride)
        if self.stride < 1:
            raise ShapeError(f"stride must be positive, got {self.stride}")

    @property
    def out_channels(self):
        return self.weights.shape[0]

    @property
    def in_channels(self):
        return self.weights.shape[1]

    @property
    def size(self):
        return self.weights.shape[2:]


@dataclass
class BatchNormParams:
    """Per-channel normalization ``(x - mean) * scale / (std + eps) + shift``."""

    mean: np.ndarray
    std: np.ndarray
    scale: np.ndarray
    shift: np.ndarray
    eps: float = 1e-5

    def __post_init__(self):
        self.mean, self.std, self.scale, self.shift = (
            _as_float(v).reshape(-1) for v in (self.mean, self.std, self.scale, self.shift))
        n = {len(self.mean), len(self.std), len(self.scale), len(self.shift)}
        if len(n) != 1:
            raise ShapeError("batch-norm vectors must share one length")
        if np.any(self.std < 0):
            raise ValueError("batch-norm std must be non-negative")

    @classmethod
    def identity(cls, channels, eps=1e-5):
        dt = get_dtype()
        return cls(np.zeros(channels, dt), np.ones(channels, dt), np.ones(channels, dt),
                   np.zeros(channels, dt), eps)

    def __len__(self):
        return len(self.mean)


def conv_output_size(size, k, pad, stride):
    return (size + 2 * pad - k) // stride + 1


def _check_conv(x, weights, padding):
    if x.ndim != 4:
        raise ShapeError(f"conv2d expects NCHW input, got shape {x.shape}")
    if x.shape[1] != weights.shape[1]:
        raise ShapeError(
            f"input shape {x.shape} has {x.shape[1]} channels but kernel shape "
            f"{weights.shape} expects {weights.shape[1]}")
    kh, kw = weights.shape[2:]
    if x.shape[2] + 2 * padding[0] < kh or x.shape[3] + 2 * padding[1] < kw:
        raise ShapeError(f"padded input shape {x.shape} smaller than kernel shape {weights.shape}")


def conv_forward(x, weights, bias, padding=(0, 0), stride=1):
    """Convolve and also return the im2col buffer for reuse in the backward pass."""
    _check_conv(x, weights, padding)
    n, _, h, w = x.shape
    d, c, kh, kw = weights.shape
    ph, pw = padding
    ho = conv_output_size(h, kh, ph, stride)
    wo = conv_output_size(w, kw, pw, stride)
    cols = kernels.im2col(x, kh, kw, ph, pw, stride, ho, wo)
    out = np.matmul(weights.reshape(d, c * kh * kw), cols)
    out += bias.reshape(1, d, 1)
    return out.reshape(n, d, ho, wo), cols


def conv_backward(x_shape, weights, padding, stride, grad_out, cols):
    n, c, h, w = x_shape
    d, _, kh, kw = weights.shape
    ho, wo = grad_out.shape[2:]
    g = grad_out.reshape(n, d, ho * wo)
    grad_w = np.tensordot(g, cols, axes=([0, 2], [0, 2])).reshape(weights.shape)
    grad_b = g.sum(axis=(0, 2))
    gcols = np.matmul(weights.reshape(d, c * kh * kw).T, g)
    grad_x = kernels.col2im(gcols, h, w, kh, kw, padding[0], padding[1], stride, ho, wo)
    return grad_x, grad_w, grad_b


def conv2d(x, k: ConvKernel):
    """Zero-padded strided cross-correlation of ``x`` with ``k`` plus bias."""
    return conv_forward(_as_float(x), k.weights, k.bias, k.padding, k.stride)[0]


def conv2d_backward(x, k: ConvKernel, grad_out):
    """Gradients of ``sum(grad_out * conv2d(x, k))`` w.r.t. input, weights and bias."""
    x = _as_float(x)
    _check_conv(x, k.weights, k.padding)
    expect = (x.shape[0], k.out_channels,
              conv_output_size(x.shape[2], k.size[0], k.padding[0], k.stride),
              conv_output_size(x.shape[3], k.size[1], k.padding[1], k.stride))
    if tuple(grad_out.shape) != expect:
        raise ShapeError(f"grad_out shape {grad_out.shape} != conv output shape {expect}")
    kh, kw = k.size
    cols = kernels.im2col(x, kh, kw, k.padding[0], k.padding[1], k.stride, expect[2], expect[3])
    return conv_backward(x.shape, k.weights, k.padding, k.stride, grad_out, cols)


# -- batch norm ---------------------------------------------------------------

def _check_bn(x, channels):
    if x.ndim != 4 or x.shape[1] != channels:
        raise ShapeError(f"batch norm over {channels} channels got input shape {x.shape}")


def batchnorm(x, p: BatchNormParams):
    """Inference-mode batch norm with the stored statistics."""
    x = _as_float(x)
    _check_bn(x, len(p))
    factor = p.scale / (p.std + p.eps)
    return (x - p.mean[None, :, None, None]) * factor[None, :, None, None] + p.shift[None, :, None, None]


@dataclass
class _BNCache:
    centered: np.ndarray
    std: np.ndarray
    scale: np.ndarray
    eps: float
    xhat: np.ndarray = field(repr=False)


def batchnorm_train(x, p: BatchNormParams, momentum=0.9):
    """Training-mode batch norm on batch statistics (population variance).

    Updates ``p.mean`` and ``p.std`` in place as running averages and
    returns ``(out, cache)``.
    """
    x = _as_float(x)
    _check_bn(x, len(p))
    mean = x.mean(axis=(0, 2, 3))
    centered = x - mean[None, :, None, None]
    std = np.sqrt((centered * centered).mean(axis=(0, 2, 3)))
    xhat = centered / (std + p.eps)[None, :, None, None]
    out = xhat * p.scale[None, :, None, None] + p.shift[None, :, None, None]
    p.mean *= momentum
    p.mean += (1.0 - momentum) * mean
    p.std *= momentum
    p.std += (1.0 - momentum) * std
    return out, _BNCache(centered, std, p.scale.copy(), p.eps, xhat)


def batchnorm_train_backward(grad_out, cache: _BNCache):
    """Returns ``(grad_x, grad_scale, grad_shift)`` for :func:`batchnorm_train`."""
    m = grad_out.shape[0] * grad_out.shape[2] * grad_out.shape[3]
    grad_scale = (grad_out * cache.xhat).sum(axis=(0, 2, 3))
    grad_shift = grad_out.sum(axis=(0, 2, 3))
    s = cache.std + cache.eps
    g_mean = grad_shift / m
    gc = (grad_out * cache.centered).sum(axis=(0, 2, 3))
    # d std / d x_i = (x_i - mean) / (m * std); vanishes when std == 0
    safe = np.where(cache.std > 0, cache.std, 1.0)
    coef = np.where(cache.std > 0, gc / (m * safe * s), 0.0)
    grad_x = (cache.scale / s)[None, :, None, None] * (
        grad_out - g_mean[None, :, None, None] - cache.centered * coef[None, :, None, None])
    return grad_x, grad_scale, grad_shift


# -- activations ----------------------------------------------------------------

ACTIVATIONS = ("identity", "relu", "leaky_relu", "sigmoid", "softmax")


def sigmoid(x):
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softmax_channels(x):
    z = x - x.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def activation(x, kind, alpha=0.2):
    """Apply ``kind`` elementwise (softmax: across channels of each pixel)."""
    x = _as_float(x)
    if kind == "identity":
        return x
    if kind == "relu":
        return np.maximum(x, 0.0)
    if kind == "leaky_relu":
        return np.where(x >= 0, x, alpha * x)
    if kind == "sigmoid":
        return sigmoid(x)
    if kind == "softmax":
        return softmax_channels(x)
    raise ValueError(f"unknown activation {kind!r}; expected one of {ACTIVATIONS}")


def activation_backward(grad_out, x, out, kind, alpha=0.2):
    if kind == "identity":
        return grad_out
    if kind == "relu":
        return grad_out * (x > 0)
    if kind == "leaky_relu":
        return np.where(x >= 0, grad_out, alpha * grad_out)
    if kind == "sigmoid":
        return grad_out * out * (1.0 - out)
    if kind == "softmax":
        return softmax_backward(grad_out, out)
    raise ValueError(f"unknown activation {kind!r}")


def softmax_backward(grad_out, probs):
    return probs * (grad_out - (grad_out * probs).sum(axis=1, keepdims=True))


# -- pooling / resampling -----------------------------------------------------

def global_avg_pool(x):
    x = _as_float(x)
    return x.mean(axis=(2, 3), keepdims=True)


def global_avg_pool_backward(grad_out, x_shape):
    h, w = x_shape[2:]
    return np.broadcast_to(grad_out / (h * w), x_shape).copy()


def upsample2x(x):
    """Nearest-neighbour x2 upsampling."""
    return x.repeat(2, axis=2).repeat(2, axis=3)


def upsample2x_backward(grad_out):
    n, c, h, w = grad_out.shape
    return grad_out.reshape(n, c, h // 2, 2, w // 2, 2).sum(axis=(3, 5))


# -- binary serialization -----------------------------------------------------

TENSOR_MAGIC = b"DLAT"
TENSOR_VERSION = 1
_DTYPE_CODES = {0: np.dtype("<f8"), 1: np.dtype("<f4")}


class TensorFormatError(ValueError):
    """Malformed tensor record; ``offset`` is the byte position of the fault."""

    def __init__(self, message, offset):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


def tensor_to_bytes(a):
    a = np.asarray(a)
    if a.dtype == np.float64:
        code = 0
    elif a.dtype == np.float32:
        code = 1
    else:
        raise TypeError(f"only float32/float64 tensors serialize, got {a.dtype}")
    dims = a.shape if a.ndim else (1,)
    if any(d < 1 for d in dims):
        raise ShapeError(f"tensor dims must be >= 1, got {a.shape}")
    head = TENSOR_MAGIC + struct.pack("<HBB", TENSOR_VERSION, code, len(dims))
    head += struct.pack(f"<{len(dims)}Q", *dims)
    return head + np.ascontiguousarray(a, dtype=_DTYPE_CODES[code]).tobytes()


def tensor_from_bytes(buf, offset=0):
    """Decode one tensor starting at ``offset``; returns ``(array, next_offset)``."""
    if len(buf) - offset < 8:
        raise TensorFormatError("truncated tensor header", offset)
    if bytes(buf[offset:offset + 4]) != TENSOR_MAGIC:
        raise TensorFormatError("bad tensor magic", offset)
    version, code, ndim = struct.unpack_from("<HBB", buf, offset + 4)
    if version != TENSOR_VERSION:
        raise TensorFormatError(f"unsupported tensor version {version}", offset + 4)
    if code not in _DTYPE_CODES:
        raise TensorFormatError(f"unknown dtype code {code}", offset + 6)
    offset += 8
    if ndim == 0 or len(buf) - offset < 8 * ndim:
        raise TensorFormatError("truncated tensor dims", offset)
    dims = struct.unpack_from(f"<{ndim}Q", buf, offset)
    if any(d < 1 for d in dims):
        raise TensorFormatError(f"zero dimension in {dims}", offset)
    offset += 8 * ndim
    dt = _DTYPE_CODES[code]
    nbytes = int(np.prod(dims)) * dt.itemsize
    if len(buf) - offset < nbytes:
        raise TensorFormatError(f"tensor data truncated: need {nbytes} bytes", offset)
    arr = np.frombuffer(buf, dtype=dt, count=nbytes // dt.itemsize, offset=offset)
    arr = arr.astype(dt.newbyteorder("="), copy=True).reshape(dims)
    return arr, offset + nbytes


def save_tensor(path, a):
    from .io_utils import atomic_write_bytes
    atomic_write_bytes(path, tensor_to_bytes(a))


def load_tensor(path):
    with open(path, "rb") as fh:
        buf = fh.read()
    arr, end = tensor_from_bytes(buf)
    if end != len(buf):
        raise TensorFormatError("trailing bytes after tensor", end)
    return arr
