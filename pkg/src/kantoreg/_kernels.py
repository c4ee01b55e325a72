"""Hot loops with a numba path and a pure-numpy fallback.

The backend is chosen once at import time. Set ``KANTOREG_BACKEND=numpy`` to
force the fallback (useful for debugging, or where numba is unavailable).
Both paths produce the same numbers up to floating point reassociation; the
test-suite checks that.
"""
from __future__ import annotations

import os

import numpy as np

_REQUESTED = os.environ.get("KANTOREG_BACKEND", "numba").strip().lower()

try:  # pragma: no cover - import guard
    if _REQUESTED == "numpy":
        raise ImportError("numba disabled by KANTOREG_BACKEND")
    import numba
    from numba import njit, prange

    if "NUMBA_THREADING_LAYER" not in os.environ:
        # skip the TBB probe, which warns on older TBB installs
        numba.config.THREADING_LAYER = "workqueue"

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    numba = None
    HAVE_NUMBA = False

BACKEND = "numba" if HAVE_NUMBA else "numpy"


def set_threads(n: int | None) -> None:
    """Cap the number of worker threads used by numba kernels."""
    if n is None or not HAVE_NUMBA:
        return
    n = max(1, min(int(n), numba.config.NUMBA_NUM_THREADS))
    numba.set_num_threads(n)


# ---------------------------------------------------------------------------
# c-transform: out[m] = min_k 0.5*|src_k - tgt_m|^2 - phi_k, with argmin
# ---------------------------------------------------------------------------

def c_transform_numpy(src, phi, tgt, chunk=512):
    src = np.ascontiguousarray(src, dtype=float)
    tgt = np.ascontiguousarray(tgt, dtype=float)
    phi = np.ascontiguousarray(phi, dtype=float)
    m = tgt.shape[0]
    out = np.empty(m)
    arg = np.empty(m, dtype=np.int64)
    for s in range(0, m, chunk):
        t = tgt[s:s + chunk]
        cost = 0.5 * ((t[:, 0, None] - src[None, :, 0]) ** 2
                      + (t[:, 1, None] - src[None, :, 1]) ** 2) - phi[None, :]
        k = np.argmin(cost, axis=1)
        arg[s:s + chunk] = k
        out[s:s + chunk] = cost[np.arange(t.shape[0]), k]
    return out, arg


def grid_c_transform_numpy(phi, xc, yc):
    """Exact c-transform on a tensor grid, minimising one axis at a time."""
    phi = np.asarray(phi, dtype=float)
    nx, ny = phi.shape
    # pass 1: inner[i, t] = min_k (yc_k - yc_t)^2 / 2 - phi[i, k]
    cy = 0.5 * (yc[None, :] - yc[:, None]) ** 2          # (t, k)
    c1 = cy[None, :, :] - phi[:, None, :]                # (i, t, k)
    ka = np.argmin(c1, axis=2)
    inner = np.take_along_axis(c1, ka[..., None], axis=2)[..., 0]
    # pass 2: out[s, t] = min_i (xc_i - xc_s)^2 / 2 + inner[i, t]
    cx = 0.5 * (xc[None, :] - xc[:, None]) ** 2          # (s, i)
    c2 = cx[:, :, None] + inner[None, :, :]              # (s, i, t)
    ia = np.argmin(c2, axis=1)
    out = np.take_along_axis(c2, ia[:, None, :], axis=1)[:, 0, :]
    arg = ia * ny + ka[ia, np.arange(ny)[None, :]]
    return out, arg


# ---------------------------------------------------------------------------
# bilinear splatting of point masses onto a cell-centred grid
# (positions given in fractional index units, already clamped to the hull)
# ---------------------------------------------------------------------------

def splat_numpy(px, py, mass, nx, ny):
    px = np.asarray(px, dtype=float).ravel()
    py = np.asarray(py, dtype=float).ravel()
    mass = np.asarray(mass, dtype=float).ravel()
    i0 = np.minimum(np.floor(px).astype(np.int64), nx - 2) if nx > 1 else np.zeros(px.size, np.int64)
    j0 = np.minimum(np.floor(py).astype(np.int64), ny - 2) if ny > 1 else np.zeros(py.size, np.int64)
    fx = px - i0
    fy = py - j0
    out = np.zeros(nx * ny)
    for di, wx in ((0, 1.0 - fx), (1, fx)):
        for dj, wy in ((0, 1.0 - fy), (1, fy)):
            np.add.at(out, (i0 + di) * ny + (j0 + dj), mass * wx * wy)
    return out.reshape(nx, ny)


# ---------------------------------------------------------------------------
# weighted 2D histogram of bin pairs: out[a, b] = sum w over (ba == a, bb == b)
# ---------------------------------------------------------------------------

def pair_histogram_numpy(ba, bb, w, na, nb):
    idx = np.asarray(ba, dtype=np.int64).ravel() * nb + np.asarray(bb, dtype=np.int64).ravel()
    h = np.bincount(idx, weights=np.asarray(w, dtype=float).ravel(), minlength=na * nb)
    return h.reshape(na, nb)


if HAVE_NUMBA:

    @njit(cache=True, parallel=True)
    def _c_transform_nb(src, phi, tgt):  # pragma: no cover - compiled
        m = tgt.shape[0]
        k = src.shape[0]
        out = np.empty(m)
        arg = np.empty(m, dtype=np.int64)
        for t in prange(m):
            ty0 = tgt[t, 0]
            ty1 = tgt[t, 1]
            best = np.inf
            bi = 0
            for s in range(k):
                d0 = src[s, 0] - ty0
                d1 = src[s, 1] - ty1
                v = 0.5 * (d0 * d0 + d1 * d1) - phi[s]
                if v < best:
                    best = v
                    bi = s
            out[t] = best
            arg[t] = bi
        return out, arg

    @njit(cache=True, parallel=True)
    def _grid_c_transform_nb(phi, xc, yc):  # pragma: no cover - compiled
        nx, ny = phi.shape
        inner = np.empty((nx, ny))
        ka = np.empty((nx, ny), dtype=np.int64)
        for i in prange(nx):
            for t in range(ny):
                best = np.inf
                bk = 0
                for k in range(ny):
                    d = yc[k] - yc[t]
                    v = 0.5 * d * d - phi[i, k]
                    if v < best:
                        best = v
                        bk = k
                inner[i, t] = best
                ka[i, t] = bk
        out = np.empty((nx, ny))
        arg = np.empty((nx, ny), dtype=np.int64)
        for s in prange(nx):
            for t in range(ny):
                best = np.inf
                bi = 0
                for i in range(nx):
                    d = xc[i] - xc[s]
                    v = 0.5 * d * d + inner[i, t]
                    if v < best:
                        best = v
                        bi = i
                out[s, t] = best
                arg[s, t] = bi * ny + ka[bi, t]
        return out, arg

    @njit(cache=True)
    def _splat_nb(px, py, mass, nx, ny):  # pragma: no cover - compiled
        out = np.zeros((nx, ny))
        for t in range(px.shape[0]):
            i0 = int(np.floor(px[t]))
            j0 = int(np.floor(py[t]))
            if i0 > nx - 2:
                i0 = nx - 2
            if j0 > ny - 2:
                j0 = ny - 2
            if i0 < 0:
                i0 = 0
            if j0 < 0:
                j0 = 0
            fx = px[t] - i0
            fy = py[t] - j0
            m = mass[t]
            out[i0, j0] += m * (1.0 - fx) * (1.0 - fy)
            out[i0 + 1, j0] += m * fx * (1.0 - fy)
            out[i0, j0 + 1] += m * (1.0 - fx) * fy
            out[i0 + 1, j0 + 1] += m * fx * fy
        return out

    @njit(cache=True)
    def _pair_histogram_nb(ba, bb, w, na, nb):  # pragma: no cover - compiled
        out = np.zeros((na, nb))
        for t in range(ba.shape[0]):
            out[ba[t], bb[t]] += w[t]
        return out


def c_transform_kernel(src, phi, tgt):
    """Brute-force discrete c-transform for the quadratic cost.

    Parameters
    ----------
    src : (N, 2) array
        Source node coordinates.
    phi : (N,) array
        Potential values at the source nodes.
    tgt : (M, 2) array
        Target node coordinates.

    Returns
    -------
    values : (M,) array
        ``min_k |src_k - tgt_m|^2 / 2 - phi_k``.
    argmin : (M,) int array
        Index of the minimising source node (first one on ties).
    """
    if HAVE_NUMBA:
        return _c_transform_nb(np.ascontiguousarray(src, dtype=np.float64),
                               np.ascontiguousarray(phi, dtype=np.float64),
                               np.ascontiguousarray(tgt, dtype=np.float64))
    return c_transform_numpy(src, phi, tgt)


def grid_c_transform_kernel(phi, xc, yc):
    """c-transform from a tensor grid onto itself, exact, in two axis passes.

    Same minimum as :func:`c_transform_kernel` on ``points = xc x yc``
    (the quadratic cost separates by axis) at ``O(N (nx + ny))`` cost.
    Returns ``(values (nx, ny), flat argmin (nx, ny))``.
    """
    xc = np.ascontiguousarray(xc, dtype=np.float64)
    yc = np.ascontiguousarray(yc, dtype=np.float64)
    if HAVE_NUMBA:
        return _grid_c_transform_nb(np.ascontiguousarray(phi, dtype=np.float64), xc, yc)
    return grid_c_transform_numpy(phi, xc, yc)


def splat_kernel(px, py, mass, nx, ny):
    """Deposit ``mass`` at fractional grid positions with bilinear weights."""
    if nx < 2 or ny < 2:
        return splat_numpy(px, py, mass, nx, ny)
    if HAVE_NUMBA:
        return _splat_nb(np.ascontiguousarray(px, dtype=np.float64).ravel(),
                         np.ascontiguousarray(py, dtype=np.float64).ravel(),
                         np.ascontiguousarray(mass, dtype=np.float64).ravel(),
                         int(nx), int(ny))
    return splat_numpy(px, py, mass, nx, ny)


def pair_histogram(ba, bb, w, na, nb):
    """Weighted joint histogram of two integer label arrays."""
    if HAVE_NUMBA:
        return _pair_histogram_nb(np.ascontiguousarray(ba, dtype=np.int64).ravel(),
                                  np.ascontiguousarray(bb, dtype=np.int64).ravel(),
                                  np.ascontiguousarray(w, dtype=np.float64).ravel(),
                                  int(na), int(nb))
    return pair_histogram_numpy(ba, bb, w, na, nb)
