"""Hot inner loops: im2col / col2im for NCHW convolution.

Two interchangeable implementations are provided. The numba ones are used
when numba imports and ``DLAPLAN_NUMBA`` is not set to ``0``; otherwise the
numpy ones are used. Both produce bit-identical results (pure data movement,
and col2im accumulates in the same order).

Column layout: ``cols[n, (c * kh + i) * kw + j, y * wo + x]`` holds
``x_padded[n, c, y * stride + i, x * stride + j]``, so a weight tensor of
shape ``(D, C, kh, kw)`` reshaped to ``(D, C * kh * kw)`` multiplies it
directly.
"""
import numpy as np

from ._config import numba_requested

try:
    import numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None


def im2col_numpy(x, kh, kw, ph, pw, stride, ho, wo):
    n, c, h, w = x.shape
    if ph or pw:
        xp = np.zeros((n, c, h + 2 * ph, w + 2 * pw), dtype=x.dtype)
        xp[:, :, ph:ph + h, pw:pw + w] = x
    else:
        xp = x
    cols = np.empty((n, c, kh, kw, ho, wo), dtype=x.dtype)
    ye = (ho - 1) * stride + 1
    xe = (wo - 1) * stride + 1
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i:i + ye:stride, j:j + xe:stride]
    return cols.reshape(n, c * kh * kw, ho * wo)


def col2im_numpy(cols, h, w, kh, kw, ph, pw, stride, ho, wo):
    n = cols.shape[0]
    c = cols.shape[1] // (kh * kw)
    cols = cols.reshape(n, c, kh, kw, ho, wo)
    xp = np.zeros((n, c, h + 2 * ph, w + 2 * pw), dtype=cols.dtype)
    ye = (ho - 1) * stride + 1
    xe = (wo - 1) * stride + 1
    for i in range(kh):
        for j in range(kw):
            xp[:, :, i:i + ye:stride, j:j + xe:stride] += cols[:, :, i, j]
    return xp[:, :, ph:ph + h, pw:pw + w].copy()


def _valid_range(i, pad, stride, size, n_out):
    # output positions o with 0 <= o * stride + i - pad < size
    lo = 0
    if i < pad:
        lo = (pad - i + stride - 1) // stride
    hi = (size - 1 + pad - i) // stride + 1
    if hi > n_out:
        hi = n_out
    if hi < lo:
        hi = lo
    return lo, hi


def _im2col_loops(x, kh, kw, ph, pw, stride, ho, wo):
    n, c, h, w = x.shape
    cols = np.empty((n, c * kh * kw, ho * wo), dtype=x.dtype)
    # plain element loops compile to tighter code than per-row slice copies;
    # padding taps are written as zeros so the buffer needs no clearing pass
    for b in range(n):
        for ch in range(c):
            for i in range(kh):
                for j in range(kw):
                    r = (ch * kh + i) * kw + j
                    for y in range(ho):
                        yy = y * stride + i - ph
                        base = y * wo
                        if yy < 0 or yy >= h:
                            for xo in range(wo):
                                cols[b, r, base + xo] = 0.0
                            continue
                        for xo in range(wo):
                            xx = xo * stride + j - pw
                            if 0 <= xx < w:
                                cols[b, r, base + xo] = x[b, ch, yy, xx]
                            else:
                                cols[b, r, base + xo] = 0.0
    return cols


def _col2im_loops(cols, h, w, kh, kw, ph, pw, stride, ho, wo):
    n = cols.shape[0]
    c = cols.shape[1] // (kh * kw)
    out = np.zeros((n, c, h, w), dtype=cols.dtype)
    # kernel-offset-outer order matches col2im_numpy's accumulation order
    for b in range(n):
        for ch in range(c):
            dst = out[b, ch]
            for i in range(kh):
                y0, y1 = _valid_range(i, ph, stride, h, ho)
                for j in range(kw):
                    x0, x1 = _valid_range(j, pw, stride, w, wo)
                    src = cols[b, (ch * kh + i) * kw + j]
                    for y in range(y0, y1):
                        drow = dst[y * stride + i - ph]
                        base = y * wo
                        off = j - pw
                        for xo in range(x0, x1):
                            drow[xo * stride + off] += src[base + xo]
    return out


if numba is not None:
    _valid_range = numba.njit(cache=True, inline="always")(_valid_range)
    im2col_numba = numba.njit(cache=True, nogil=True)(_im2col_loops)
    col2im_numba = numba.njit(cache=True, nogil=True)(_col2im_loops)
else:  # pragma: no cover
    im2col_numba = col2im_numba = None

USE_NUMBA = numba is not None and numba_requested()

if USE_NUMBA:
    _im2col, _col2im = im2col_numba, col2im_numba
else:
    _im2col, _col2im = im2col_numpy, col2im_numpy


def backend():
    return "numba" if USE_NUMBA else "numpy"


def im2col(x, kh, kw, ph, pw, stride, ho, wo):
    """Unfold ``x`` (N, C, H, W) into convolution columns (N, C*kh*kw, ho*wo)."""
    return _im2col(np.ascontiguousarray(x), kh, kw, ph, pw, stride, ho, wo)


def col2im(cols, h, w, kh, kw, ph, pw, stride, ho, wo):
    """Adjoint of :func:`im2col`; returns the unpadded (N, C, h, w) gradient."""
    return _col2im(np.ascontiguousarray(cols), h, w, kh, kw, ph, pw, stride, ho, wo)
