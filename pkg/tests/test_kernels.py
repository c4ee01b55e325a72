"""The compiled kernels and their numpy fallbacks must agree."""
import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, strategies as st

from kantoreg import _kernels as K

needs_numba = pytest.mark.skipif(not K.HAVE_NUMBA, reason="numba not installed")


def grid_points(nx, ny):
    xc = (np.arange(nx) + 0.5) / nx
    yc = (np.arange(ny) + 0.5) / ny
    X, Y = np.meshgrid(xc, yc, indexing="ij")
    return xc, yc, np.column_stack([X.ravel(), Y.ravel()])


@needs_numba
@given(st.integers(2, 12), st.integers(2, 12), st.integers(0, 2 ** 32 - 1))
def test_c_transform_backends_agree(nx, ny, seed):
    _, _, pts = grid_points(nx, ny)
    phi = np.random.default_rng(seed).normal(0, 0.1, nx * ny)
    v1, a1 = K._c_transform_nb(pts, phi, pts)
    v2, a2 = K.c_transform_numpy(pts, phi, pts)
    assert np.allclose(v1, v2, atol=1e-14)
    assert np.array_equal(a1, a2)


@given(st.integers(2, 12), st.integers(2, 12), st.integers(0, 2 ** 32 - 1))
def test_separable_c_transform_matches_brute_force(nx, ny, seed):
    xc, yc, pts = grid_points(nx, ny)
    phi = np.random.default_rng(seed).normal(0, 0.1, (nx, ny))
    brute, _ = K.c_transform_numpy(pts, phi.ravel(), pts)
    vals, arg = K.grid_c_transform_numpy(phi, xc, yc)
    assert np.allclose(vals.ravel(), brute, atol=1e-14)
    # the argmin attains the minimum even when ties are broken differently
    cost = 0.5 * np.sum((pts[arg.ravel()] - pts) ** 2, axis=1) - phi.ravel()[arg.ravel()]
    assert np.allclose(cost, brute, atol=1e-14)
    if K.HAVE_NUMBA:
        v_nb, a_nb = K._grid_c_transform_nb(phi, xc, yc)
        assert np.allclose(v_nb, vals, atol=1e-14)
        assert np.array_equal(a_nb, arg)


@needs_numba
@given(st.integers(2, 10), st.integers(2, 10), st.integers(0, 2 ** 32 - 1))
def test_splat_backends_agree(nx, ny, seed):
    rng = np.random.default_rng(seed)
    px = rng.uniform(0, nx - 1, 50)
    py = rng.uniform(0, ny - 1, 50)
    m = rng.uniform(0, 1, 50)
    a = K._splat_nb(px, py, m, nx, ny)
    b = K.splat_numpy(px, py, m, nx, ny)
    assert np.allclose(a, b, atol=1e-14)
    assert abs(a.sum() - m.sum()) < 1e-12


@needs_numba
def test_pair_histogram_backends_agree():
    rng = np.random.default_rng(4)
    ba = rng.integers(0, 7, 500)
    bb = rng.integers(0, 5, 500)
    w = rng.uniform(size=500)
    assert np.allclose(K._pair_histogram_nb(ba, bb, w, 7, 5),
                       K.pair_histogram_numpy(ba, bb, w, 7, 5), atol=1e-12)


def test_env_var_selects_fallback():
    env = dict(os.environ, KANTOREG_BACKEND="numpy")
    out = subprocess.run([sys.executable, "-c", "import kantoreg; print(kantoreg.BACKEND)"],
                         env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "numpy"


def test_set_threads_accepts_none_and_caps():
    K.set_threads(None)
    K.set_threads(10_000)
    if K.HAVE_NUMBA:
        assert K.numba.get_num_threads() <= K.numba.config.NUMBA_NUM_THREADS
