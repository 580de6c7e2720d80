"""Direction-aware learnable additive (DLA) kernels and kernel fusion.

A DLA kernel carries six parameters per (out, in) channel pair: the main
diagonal ``a11, a22, a33`` and the anti-diagonal ``b13, b22, b31`` of a 3x3
grid. Its dense form is the position-wise sum of the two diagonal kernels::

    [[a11,   0,     b13],
     [0,     a22+b22, 0],
     [b31,   0,     a33]]

Convolution is linear in the kernel, so several same-resolution branches
(1x3, 3x1, 3x3, DLA) collapse into one 3x3 kernel, and an inference-mode
batch norm folds into that kernel's weights and bias.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._config import get_dtype
from .tensor import BatchNormParams, ConvKernel, ShapeError

# (row, col) of a11, a22, a33, b13, b22, b31 in the dense 3x3 grid
PARAM_POSITIONS = ((0, 0), (1, 1), (2, 2), (0, 2), (1, 1), (2, 0))
PARAM_NAMES = ("a11", "a22", "a33", "b13", "b22", "b31")
_ROWS = np.array([p[0] for p in PARAM_POSITIONS])
_COLS = np.array([p[1] for p in PARAM_POSITIONS])
OFF_PATTERN = ((0, 1), (1, 0), (1, 2), (2, 1))


class FusionError(ValueError):
    """Branches that cannot be merged into one kernel."""


@dataclass
class DLAKernel:
    params: np.ndarray  # (out_channels, in_channels, 6)
    bias: np.ndarray
    stride: int = 1

    def __post_init__(self):
        self.params = np.asarray(self.params)
        if not np.issubdtype(self.params.dtype, np.floating):
            self.params = self.params.astype(get_dtype())
        self.bias = np.asarray(self.bias, dtype=self.params.dtype).reshape(-1)
        if self.params.ndim != 3 or self.params.shape[2] != 6:
            raise ShapeError(f"DLA params must be (out, in, 6), got {self.params.shape}")
        if self.bias.shape[0] != self.params.shape[0]:
            raise ShapeError(f"bias length {self.bias.shape[0]} != out_channels {self.params.shape[0]}")

    @classmethod
    def from_diagonals(cls, a, b, bias=0.0, stride=1):
        """Single-channel kernel from ``a = (a11, a22, a33)`` and ``b = (b13, b22, b31)``."""
        p = np.array(list(a) + list(b), dtype=get_dtype()).reshape(1, 1, 6)
        return cls(p, np.array([bias], dtype=get_dtype()), stride)

    @classmethod
    def init(cls, out_channels, in_channels, rng, stride=1):
        std = np.sqrt(2.0 / (3.0 * in_channels))
        p = rng.normal(0.0, std, size=(out_channels, in_channels, 6)).astype(get_dtype())
        return cls(p, np.zeros(out_channels, dtype=get_dtype()), stride)

    @property
    def out_channels(self):
        return self.params.shape[0]

    @property
    def in_channels(self):
        return self.params.shape[1]


def materialize_weights(params):
    """Dense (D, C, 3, 3) weights from (D, C, 6) DLA parameters."""
    dense = np.zeros(params.shape[:2] + (3, 3), dtype=params.dtype)
    # unbuffered add so a22 and b22 both land on the centre
    np.add.at(dense, (slice(None), slice(None), _ROWS, _COLS), params)
    return dense


def materialize(k: DLAKernel) -> ConvKernel:
    return ConvKernel(materialize_weights(k.params), k.bias.copy(), (1, 1), k.stride)


def dla_grad_mask(grad_dense):
    """Project a dense 3x3 gradient onto the six DLA parameters.

    The centre entry feeds both ``a22`` and ``b22``; the four off-pattern
    entries are dropped.
    """
    grad_dense = np.asarray(grad_dense)
    if grad_dense.shape[-2:] != (3, 3):
        raise ShapeError(f"expected trailing 3x3 gradient, got {grad_dense.shape}")
    return grad_dense[..., _ROWS, _COLS]


def embed_3x3(weights):
    """Place a 1x3, 3x1 or 3x3 kernel on the centred 3x3 grid."""
    kh, kw = weights.shape[2:]
    if (kh, kw) not in ((1, 3), (3, 1), (3, 3)):
        raise FusionError(f"cannot embed a {kh}x{kw} kernel into 3x3")
    out = np.zeros(weights.shape[:2] + (3, 3), dtype=weights.dtype)
    r0 = (3 - kh) // 2
    c0 = (3 - kw) // 2
    out[:, :, r0:r0 + kh, c0:c0 + kw] = weights
    return out


def branch_additivity_fuse(kernels) -> ConvKernel:
    """Merge parallel same-input branches into one centred 3x3 kernel.

    Each branch must be padded so that it is centred (``(kh-1)/2, (kw-1)/2``),
    which makes every branch output the same resolution; the fused kernel's
    output then equals the sum of the branch outputs, biases included.
    """
    kernels = [materialize(k) if isinstance(k, DLAKernel) else k for k in kernels]
    if not kernels:
        raise FusionError("nothing to fuse")
    first = kernels[0]
    weights = np.zeros((first.out_channels, first.in_channels, 3, 3), dtype=first.weights.dtype)
    bias = np.zeros(first.out_channels, dtype=first.weights.dtype)
    for k in kernels:
        if (k.out_channels, k.in_channels) != (first.out_channels, first.in_channels):
            raise FusionError(
                f"channel mismatch: {k.weights.shape[:2]} vs {first.weights.shape[:2]}")
        if k.stride != first.stride:
            raise FusionError(f"stride mismatch: {k.stride} vs {first.stride}")
        kh, kw = k.size
        if tuple(k.padding) != ((kh - 1) // 2, (kw - 1) // 2):
            raise FusionError(f"{kh}x{kw} branch padding {k.padding} is not centred")
        weights += embed_3x3(k.weights)
        bias += k.bias
    return ConvKernel(weights, bias, (1, 1), first.stride)


def fold_batchnorm(k: ConvKernel, p: BatchNormParams) -> ConvKernel:
    """Absorb an inference-mode batch norm that follows ``k``."""
    if k.out_channels != len(p):
        raise ShapeError(f"kernel has {k.out_channels} output channels, batch norm has {len(p)}")
    factor = p.scale / (p.std + p.eps)
    weights = k.weights * factor[:, None, None, None]
    bias = (k.bias - p.mean) * factor + p.shift
    return ConvKernel(weights, bias, k.padding, k.stride)
