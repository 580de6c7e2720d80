import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dlaplan import kernels

needs_numba = pytest.mark.skipif(kernels.im2col_numba is None, reason="numba not installed")


def _dims(h, w, kh, kw, ph, pw, s):
    return (h + 2 * ph - kh) // s + 1, (w + 2 * pw - kw) // s + 1


conv_cases = st.tuples(
    st.integers(1, 3), st.integers(1, 4), st.integers(1, 9), st.integers(1, 9),
    st.sampled_from([(1, 1), (1, 3), (3, 1), (3, 3)]), st.integers(1, 3), st.integers(0, 2**32 - 1),
)


@needs_numba
@settings(max_examples=60, deadline=None)
@given(conv_cases)
def test_backends_bit_identical(case):
    n, c, h, w, (kh, kw), s, seed = case
    ph, pw = (kh - 1) // 2, (kw - 1) // 2
    ho, wo = _dims(h, w, kh, kw, ph, pw, s)
    r = np.random.default_rng(seed)
    x = r.normal(size=(n, c, h, w))
    a = kernels.im2col_numpy(x, kh, kw, ph, pw, s, ho, wo)
    b = kernels.im2col_numba(x, kh, kw, ph, pw, s, ho, wo)
    assert a.tobytes() == b.tobytes()
    g = r.normal(size=a.shape)
    a = kernels.col2im_numpy(g, h, w, kh, kw, ph, pw, s, ho, wo)
    b = kernels.col2im_numba(g, h, w, kh, kw, ph, pw, s, ho, wo)
    assert a.tobytes() == b.tobytes()


@settings(max_examples=40, deadline=None)
@given(conv_cases)
def test_col2im_is_adjoint_of_im2col(case):
    # <im2col(x), g> == <x, col2im(g)> for every x, g
    n, c, h, w, (kh, kw), s, seed = case
    ph, pw = (kh - 1) // 2, (kw - 1) // 2
    ho, wo = _dims(h, w, kh, kw, ph, pw, s)
    r = np.random.default_rng(seed)
    x = r.normal(size=(n, c, h, w))
    cols = kernels.im2col(x, kh, kw, ph, pw, s, ho, wo)
    g = r.normal(size=cols.shape)
    lhs = float((cols * g).sum())
    rhs = float((x * kernels.col2im(g, h, w, kh, kw, ph, pw, s, ho, wo)).sum())
    assert lhs == pytest.approx(rhs, rel=1e-12, abs=1e-12)


def test_im2col_layout():
    x = np.arange(9.0).reshape(1, 1, 3, 3)
    cols = kernels.im2col(x, 3, 3, 1, 1, 1, 3, 3)
    assert cols.shape == (1, 9, 9)
    # row (i=1, j=1) is the unshifted image; row (0, 0) reads one up and one left
    assert np.array_equal(cols[0, 4], x.ravel())
    assert np.array_equal(cols[0, 0].reshape(3, 3), [[0, 0, 0], [0, 0, 1], [0, 3, 4]])


def test_non_contiguous_input_accepted(rng):
    x = rng.normal(size=(1, 2, 6, 6)).transpose(0, 1, 3, 2)
    a = kernels.im2col(x, 3, 3, 1, 1, 1, 6, 6)
    b = kernels.im2col_numpy(np.ascontiguousarray(x), 3, 3, 1, 1, 1, 6, 6)
    assert np.array_equal(a, b)


@pytest.mark.parametrize("flag,expected", [("0", "numpy"), ("off", "numpy"), ("1", None)])
def test_env_flag_selects_backend(flag, expected):
    if expected is None:
        expected = "numba" if kernels.im2col_numba is not None else "numpy"
    env = dict(os.environ, DLAPLAN_NUMBA=flag)
    out = subprocess.run([sys.executable, "-c", "from dlaplan import kernels; print(kernels.backend())"],
                         env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == expected
