import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from tssg import _kernels_py as py
from tssg import kernels

ck = pytest.importorskip("tssg._ckernels", reason="compiled kernels not built")


def rand(shape, dtype, seed=0):
    return np.random.default_rng(seed).standard_normal(shape).astype(dtype)


@pytest.mark.parametrize("dtype", [np.float32, np.float64])
@pytest.mark.parametrize("shape", [(1, 1, 2, 2), (2, 3, 5, 7), (3, 4, 8, 8)])
def test_im2col_col2im_bit_identical(dtype, shape):
    x = rand(shape, dtype)
    assert np.array_equal(ck.im2col3x3(x), py.im2col3x3(x))
    cols = rand((shape[0], shape[1] * 9, shape[2] * shape[3]), dtype, 1)
    assert np.array_equal(ck.col2im3x3(cols, shape[2], shape[3]), py.col2im3x3(cols, shape[2], shape[3]))


@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_pool_unpool_bit_identical(dtype):
    # quantised values make ties common
    x = np.round(rand((2, 3, 8, 6), dtype) * 2) / 2
    out_c, idx_c = ck.maxpool2x2(x)
    out_p, idx_p = py.maxpool2x2(x)
    assert np.array_equal(out_c, out_p) and np.array_equal(idx_c, idx_p)
    assert np.array_equal(ck.unpool2x2(out_c, idx_c, 8, 6), py.unpool2x2(out_p, idx_p, 8, 6))
    g = rand((2, 3, 8, 6), dtype, 2)
    assert np.array_equal(ck.unpool2x2_gather(g, idx_c), py.unpool2x2_gather(g, idx_p))


@pytest.mark.parametrize("r", [1, 2, 3, 5])
def test_line_filters_agree(r):
    lines = rand((3, 7, 20), np.float64, r)
    np.testing.assert_allclose(
        ck.interval_gradient_lines(lines[0], r), py.interval_gradient_lines(lines[0], r), rtol=0, atol=1e-14
    )
    for nch in (1, 3):
        rc, wc = ck.rescale_lines(lines[:nch], r, 1e-4)
        rp, wp = py.rescale_lines(lines[:nch], r, 1e-4)
        np.testing.assert_allclose(rc, rp, rtol=0, atol=1e-14)
        np.testing.assert_allclose(wc, wp, rtol=0, atol=1e-14)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 2), st.integers(1, 3), st.integers(1, 6), st.integers(1, 6)),
              elements=st.floats(-10, 10)))
def test_col2im_is_adjoint_of_im2col(x):
    n, c, h, w = x.shape
    cols = np.random.default_rng(x.size).standard_normal((n, c * 9, h * w))
    lhs = np.sum(py.im2col3x3(x) * cols)
    rhs = np.sum(x * py.col2im3x3(cols, h, w))
    assert lhs == pytest.approx(rhs, rel=1e-10, abs=1e-10)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (1, 2, 4, 6), elements=st.floats(-3, 3)))
def test_unpool_gather_adjoint(x):
    out, idx = py.maxpool2x2(x)
    g = np.random.default_rng(0).standard_normal(x.shape)
    lhs = np.sum(py.unpool2x2(out, idx, 4, 6) * g)
    rhs = np.sum(out * py.unpool2x2_gather(g, idx))
    assert lhs == pytest.approx(rhs, rel=1e-12, abs=1e-12)


def test_backend_env_override():
    code = "from tssg import kernels; print(kernels.BACKEND)"
    env = dict(os.environ, TSSG_BACKEND="python")
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "python"
    env["TSSG_BACKEND"] = "bogus"
    bad = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True)
    assert bad.returncode != 0


def test_auto_prefers_compiled():
    if os.environ.get("TSSG_BACKEND", "auto") == "auto":
        assert kernels.BACKEND == "cython"
