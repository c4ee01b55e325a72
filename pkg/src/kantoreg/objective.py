"""The quadratic displacement loss, its exact gradients and Hessian.

For a fixed sign configuration the residual of record ``i`` is affine in the
stacked parameter vector ``beta = (theta_1, ..., theta_p, vartheta_1, ...)``::

    r_i(x) = T_i(x) - x + sum_j [f_j'(s_ij) phi_ij' - mean_r f_j'(s_rj) phi_rj']
             + sum_k Z_ik psi_k'(x)

with ``s_ij = +-phi_ij``. The loss ``(1/n) sum_i int r_i^2 d nu_bar`` is thus
a convex quadratic. Everything here works on indicator bins, so gradients
and Hessian blocks reduce to weighted histograms followed by cumulative sums.
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from ._kernels import pair_histogram
from .errors import KnotSpanError, NonMonotoneMapError
from .model import (Dataset, ModelSpec, PsiParams, StepParams, _sign_value, _span_tol,
                    compose_values)
from .ot1d import TransportMap1D, pushforward, w2


def step_bins(knots: np.ndarray, s: np.ndarray) -> np.ndarray:
    """``b`` with ``1{s <= z_l} = 1{b <= l}``."""
    return np.searchsorted(knots, s, side="left")


def psi_bins(knots: np.ndarray, x: np.ndarray) -> np.ndarray:
    """``c`` with ``1{x >= z_l} = 1{c >= l}``, shifted by one so ``c >= 0``.

    The returned value is the number of knots ``<= x``; the indicator for
    knot ``l`` (0-based) is ``1{c >= l + 1}``.
    """
    return np.searchsorted(knots, x, side="right")


def _binned_cumsum(bins, weights, K):
    """``out[l] = sum weights[bins <= l]`` for ``l < K``."""
    h = np.bincount(bins.ravel(), weights=weights.ravel(), minlength=K + 1)
    return np.cumsum(h[:K])


class QuadraticObjective:
    """Discrete loss for one sign configuration on one dataset.

    Parameters
    ----------
    data : Dataset
    sign_config : sequence of {"+", "-"}
    step_knots : sequence of arrays, one per distributional predictor
    psi_knots : sequence of arrays, one per scalar predictor
    check_span : bool
        Raise ``KnotSpanError`` when a signed potential leaves its knot range.
    """

    def __init__(self, data: Dataset, sign_config: Sequence[str],
                 step_knots: Sequence[np.ndarray], psi_knots: Sequence[np.ndarray] = (),
                 check_span: bool = True):
        self.data = data
        self.sign_config = tuple(sign_config)
        self.step_knots = [np.asarray(z, dtype=float) for z in step_knots]
        self.psi_knots = [np.asarray(z, dtype=float) for z in psi_knots]
        p, q = data.p, data.q
        if len(self.sign_config) != p or len(self.step_knots) != p:
            raise ValueError(f"expected {p} signs and knot vectors")
        if len(self.psi_knots) != q:
            raise ValueError(f"expected {q} covariate knot vectors")
        self.n = data.n
        self.N = data.grid.n
        x = data.grid.nodes
        self.w = data.weights
        z = data.z
        self.z = z
        self.base = data.response_maps - x + z.sum(axis=1)[:, None] * x
        self.bins = []
        for j in range(p):
            s = _sign_value(self.sign_config[j]) * data.phi[j]
            kz = self.step_knots[j]
            tol = _span_tol(kz)
            if check_span and (s.min() < kz[0] - tol or s.max() > kz[-1] + tol):
                raise KnotSpanError("knot span too small", float(s.min()), float(s.max()))
            self.bins.append(step_bins(kz, s))
        self.xbins = [psi_bins(kz, x) for kz in self.psi_knots]
        sizes = [z.size for z in self.step_knots] + [z.size for z in self.psi_knots]
        self.offsets = np.concatenate([[0], np.cumsum(sizes)]).astype(int)
        self.size = int(self.offsets[-1])
        self._qf = None

    # -- parameter vector helpers ------------------------------------------
    def split(self, beta):
        beta = np.asarray(beta, dtype=float)
        o = self.offsets
        p = len(self.step_knots)
        thetas = [beta[o[j]:o[j + 1]] for j in range(p)]
        varthetas = [beta[o[p + k]:o[p + k + 1]] for k in range(len(self.psi_knots))]
        return thetas, varthetas

    def project(self, beta, rho_box=None):
        """Clamp to the sign constraints (and the optional per-covariate cap)."""
        thetas, varthetas = self.split(beta)
        out = [np.maximum(t, 0.0) if s == "+" else np.minimum(t, 0.0)
               for t, s in zip(thetas, self.sign_config)]
        vs = [np.maximum(v, 0.0) for v in varthetas]
        if rho_box is not None:
            vs = [_cap_sum(v, c) for v, c in zip(vs, np.broadcast_to(rho_box, (len(vs),)))]
        parts = out + vs
        return np.concatenate(parts) if parts else np.zeros(0)

    def model(self, beta, theta0=np.inf) -> ModelSpec:
        thetas, varthetas = self.split(beta)
        sp = [StepParams(z, t, s, theta0) for z, t, s in
              zip(self.step_knots, thetas, self.sign_config)]
        pp = [PsiParams(z, v) for z, v in zip(self.psi_knots, varthetas)]
        return ModelSpec.from_data(self.data, sp, pp)

    # -- loss and gradient ---------------------------------------------------
    def residual(self, beta) -> np.ndarray:
        thetas, varthetas = self.split(beta)
        r = self.base.copy()
        for j, th in enumerate(thetas):
            tail = np.concatenate([np.cumsum(th[::-1])[::-1], [0.0]])
            F = tail[self.bins[j]] * self.data.dphi[j]
            r += F - F.mean(axis=0)
        for k, v in enumerate(varthetas):
            G = np.concatenate([[0.0], np.cumsum(v)])[self.xbins[k]]
            r -= self.z[:, k, None] * G[None, :]
        return r

    def loss(self, beta) -> float:
        r = self.residual(beta)
        return float(np.sum((r * r) @ self.w) / self.n)

    def grad(self, beta, residual=None) -> np.ndarray:
        r = self.residual(beta) if residual is None else residual
        out = []
        delta = r - r.mean(axis=0)
        for j, kz in enumerate(self.step_knots):
            v = delta * self.data.dphi[j] * self.w
            out.append(2.0 / self.n * _binned_cumsum(self.bins[j], v, kz.size))
        for k, kz in enumerate(self.psi_knots):
            u = (self.z[:, k] @ r) * self.w
            h = np.bincount(self.xbins[k], weights=u, minlength=kz.size + 1)
            tail = np.cumsum(h[::-1])[::-1]  # tail[c] = sum over bins >= c
            out.append(-2.0 / self.n * tail[1:])
        return np.concatenate(out) if out else np.zeros(0)

    # -- explicit quadratic form --------------------------------------------
    def quadratic_form(self):
        """Return ``(H, g, c)`` with ``loss(beta) = c + g.beta + beta.H.beta``."""
        if self._qf is not None:
            return self._qf
        n, N, w = self.n, self.N, self.w
        P = self.size
        o = self.offsets
        p, q = len(self.step_knots), len(self.psi_knots)
        H = np.zeros((P, P))
        xi = np.broadcast_to(np.arange(N), (n, N))
        # per-node averages abar_j[x, l] = (1/n) sum_i phi_ij'(x) 1{b_ij(x) <= l}
        abar = []
        for j in range(p):
            K = self.step_knots[j].size
            m = pair_histogram(xi, self.bins[j], self.data.dphi[j] / n, N, K + 1)
            abar.append(np.cumsum(m, axis=1)[:, :K])
        # indicator matrices E_k[x, l] = 1{x >= z_l}
        E = []
        for k in range(q):
            K = self.psi_knots[k].size
            E.append((self.xbins[k][:, None] >= np.arange(1, K + 1)[None, :]).astype(float))
        for j in range(p):
            Kj = self.step_knots[j].size
            for jj in range(j, p):
                Kjj = self.step_knots[jj].size
                m = pair_histogram(self.bins[j], self.bins[jj],
                                   w * self.data.dphi[j] * self.data.dphi[jj], Kj + 1, Kjj + 1)
                blk = np.cumsum(np.cumsum(m, axis=0), axis=1)[:Kj, :Kjj] / n
                blk -= abar[j].T @ (w[:, None] * abar[jj])
                H[o[j]:o[j + 1], o[jj]:o[jj + 1]] = blk
                H[o[jj]:o[jj + 1], o[j]:o[j + 1]] = blk.T
            for k in range(q):
                zk = self.z[:, k]
                m = pair_histogram(xi, self.bins[j], zk[:, None] * self.data.dphi[j], N, Kj + 1)
                B = np.cumsum(m, axis=1)[:, :Kj] - zk.sum() * abar[j]
                blk = -(B.T @ (w[:, None] * E[k])) / n
                a, b = o[p + k], o[p + k + 1]
                H[o[j]:o[j + 1], a:b] = blk
                H[a:b, o[j]:o[j + 1]] = blk.T
        if q:
            zz = self.z.T @ self.z / n
            for k in range(q):
                for kk in range(k, q):
                    blk = zz[k, kk] * (E[k].T @ (w[:, None] * E[kk]))
                    H[o[p + k]:o[p + k + 1], o[p + kk]:o[p + kk + 1]] = blk
                    H[o[p + kk]:o[p + kk + 1], o[p + k]:o[p + k + 1]] = blk.T
        zero = np.zeros(P)
        self._qf = (H, self.grad(zero), self.loss(zero))
        return self._qf

    def quadratic_form_by_columns(self):
        """Same as :meth:`quadratic_form` but from ``P + 1`` gradient calls."""
        P = self.size
        g0 = self.grad(np.zeros(P))
        H = np.empty((P, P))
        for k in range(P):
            e = np.zeros(P)
            e[k] = 1.0
            H[:, k] = 0.5 * (self.grad(e) - g0)
        return 0.5 * (H + H.T), g0, self.loss(np.zeros(P))

    def quad_loss(self, beta) -> float:
        H, g, c = self.quadratic_form()
        beta = np.asarray(beta, dtype=float)
        return float(c + g @ beta + beta @ H @ beta)


def _cap_sum(v: np.ndarray, cap: float) -> np.ndarray:
    """Euclidean projection of a nonnegative vector onto ``{v >= 0, sum v <= cap}``."""
    if cap is None or not np.isfinite(cap) or v.sum() <= cap:
        return v
    if cap <= 0:
        return np.zeros_like(v)
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - cap
    k = np.nonzero(u - css / np.arange(1, u.size + 1) > 0)[0][-1]
    tau = css[k] / (k + 1)
    return np.maximum(v - tau, 0.0)


# ---------------------------------------------------------------------------
# model-level helpers
# ---------------------------------------------------------------------------

def objective_for(model: ModelSpec, data: Dataset, check_span: bool = True) -> QuadraticObjective:
    return QuadraticObjective(data, model.sign_config, [f.knots for f in model.step_params],
                              [s.knots for s in model.psi_params], check_span=check_span)


def fitted_displacements(model: ModelSpec, data: Dataset) -> np.ndarray:
    """Derivatives of the combined potentials ``Phi_i'`` for every record, ``(n, N)``.

    Intercepts are recomputed from ``data`` (training averages), which is what
    the empirical loss uses. Works for any ``theta0``.
    """
    x = data.grid.nodes
    out = np.zeros((data.n, data.grid.n))
    for j, f in enumerate(model.step_params):
        _, scale = compose_values(f, data.phi[j])
        F = scale * data.dphi[j]
        out += F - F.mean(axis=0)
    z = data.z
    for k, s in enumerate(model.psi_params):
        out += z[:, k, None] * s.psi_prime(x)[None, :]
    return out


def displacements_from_callables(data: Dataset, fprimes: Sequence[Callable],
                                 signs: Sequence[str], psi_primes: Sequence[Callable] = ()):
    """``Phi_i'`` for arbitrary link derivatives (used with closed-form truths)."""
    x = data.grid.nodes
    out = np.zeros((data.n, data.grid.n))
    for j, (fp, s) in enumerate(zip(fprimes, signs)):
        F = fp(_sign_value(s) * data.phi[j]) * data.dphi[j]
        out += F - F.mean(axis=0)
    for k, pp in enumerate(psi_primes):
        out += data.z[:, k, None] * pp(x)[None, :]
    return out


def quadratic_loss_of_displacements(data: Dataset, disp: np.ndarray) -> float:
    r = data.response_maps - data.grid.nodes + disp
    return float(np.sum((r * r) @ data.weights) / data.n)


def empirical_loss(model: ModelSpec, data: Dataset, mode: str = "quadratic") -> float:
    """Average squared transport discrepancy between responses and predictions.

    ``quadratic`` integrates the squared gap between the response maps and the
    model maps against the reference measure. ``exact`` pushes the reference
    forward through each model map and measures the squared Wasserstein
    distance to the response; it raises ``NonMonotoneMapError`` when a model
    map is not monotone.
    """
    disp = fitted_displacements(model, data)
    if mode == "quadratic":
        return quadratic_loss_of_displacements(data, disp)
    if mode != "exact":
        raise ValueError("mode must be 'quadratic' or 'exact'")
    g = data.grid
    total = 0.0
    for i in range(data.n):
        tmap = TransportMap1D(g, g.nodes - disp[i])
        bad = tmap.first_decrease()
        if bad is not None:
            raise NonMonotoneMapError(f"record {i}: model map is not monotone", node=bad)
        total += w2(data.responses[i], pushforward(data.nu_bar, tmap)) ** 2
    return total / data.n


def grad_theta(model: ModelSpec, data: Dataset, j: int) -> np.ndarray:
    """Partial derivatives of the quadratic loss in the knot weights of predictor ``j``."""
    obj = objective_for(model, data)
    g = obj.grad(model.parameter_vector())
    return g[obj.offsets[j]:obj.offsets[j + 1]]


def grad_vartheta(model: ModelSpec, data: Dataset, k: int) -> np.ndarray:
    """Partial derivatives of the quadratic loss in the weights of covariate ``k``."""
    obj = objective_for(model, data)
    g = obj.grad(model.parameter_vector())
    p = model.p
    return g[obj.offsets[p + k]:obj.offsets[p + k + 1]]
