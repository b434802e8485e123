"""The numba kernels and their numpy fallbacks must agree."""

import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from vcnn import kernels as K

needs_numba = pytest.mark.skipif(not K.HAS_NUMBA, reason="numba unavailable or disabled")


def _conv_case(seed):
    r = np.random.default_rng(seed)
    k = tuple(int(v) for v in r.integers(1, 4, size=3))
    sp = tuple(kk + int(v) for kk, v in zip(k, r.integers(0, 5, size=3)))
    cin, cout = int(r.integers(1, 4)), int(r.integers(1, 5))
    x = r.standard_normal((2,) + sp + (cin,))
    w = r.standard_normal(k + (cin, cout))
    out = tuple(a - b + 1 for a, b in zip(sp, k))
    g = r.standard_normal((2,) + out + (cout,))
    return x, w, g


@needs_numba
@given(st.integers(0, 2**32 - 1))
def test_conv_paths_agree(seed):
    x, w, g = _conv_case(seed)
    assert np.allclose(K.conv_forward_nb(x, w), K.conv_forward_np(x, w), atol=1e-12, rtol=0)
    assert np.allclose(K.conv_grad_weight_nb(x, g, w.shape[:3]),
                       K.conv_grad_weight_np(x, g, w.shape[:3]), atol=1e-11, rtol=0)
    assert np.allclose(K.conv_grad_input_nb(g, w, x.shape),
                       K.conv_grad_input_np(g, w, x.shape), atol=1e-11, rtol=0)


@needs_numba
@given(st.integers(0, 2**32 - 1))
def test_maxpool_paths_agree(seed):
    r = np.random.default_rng(seed)
    pool = tuple(int(v) for v in r.integers(1, 3, size=3))
    stride = tuple(int(v) for v in r.integers(1, 3, size=3))
    sp = tuple(p + int(v) for p, v in zip(pool, r.integers(0, 4, size=3)))
    # small integers force ties, which both paths must break the same way
    x = r.integers(0, 3, size=(2,) + sp + (2,)).astype(np.float64)
    y1, a1 = K.maxpool_forward_nb(x, pool, stride)
    y2, a2 = K.maxpool_forward_np(x, pool, stride)
    assert np.array_equal(y1, y2) and np.array_equal(a1, a2)
    g = r.standard_normal(y1.shape)
    assert np.allclose(K.maxpool_backward_nb(g, a1, x.shape, pool, stride),
                       K.maxpool_backward_np(g, a2, x.shape, pool, stride), atol=1e-14, rtol=0)


@needs_numba
def test_float32_paths_agree():
    x, w, _ = _conv_case(7)
    x, w = x.astype(np.float32), w.astype(np.float32)
    a, b = K.conv_forward_nb(x, w), K.conv_forward_np(x, w)
    assert a.dtype == b.dtype == np.float32
    assert np.allclose(a, b, atol=1e-5)


def test_env_flag_selects_numpy():
    code = ("from vcnn import kernels as K, backend; "
            "print(backend(), K.conv_forward is K.conv_forward_np)")
    env = dict(os.environ, VCNN_DISABLE_NUMBA="1")
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    assert out.stdout.split() == ["numpy", "True"]


@needs_numba
def test_default_selects_numba():
    assert K.conv_forward is K.conv_forward_nb
    assert K.maxpool_forward is K.maxpool_forward_nb
