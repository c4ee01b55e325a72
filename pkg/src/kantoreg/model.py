"""Model objects: step parameterizations, feasibility constants, datasets,
fitted model specs and prediction."""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import expit

from .errors import DomainError, KnotSpanError, NonMonotoneMapError
from .grid import Density1D, Grid1D, _frozen
from .ot1d import (Potential1D, TransportMap1D, align_density, barycenter, ot_map,
                   potential_from_map, pushforward)

SIGNS = ("+", "-")
SUPPORT_EPS = 1e-6
DEGENERATE_TOL = 1e-8


def _sign_value(sign: str) -> float:
    if sign not in SIGNS:
        raise ValueError(f"sign must be '+' or '-', got {sign!r}")
    return 1.0 if sign == "+" else -1.0


def _span_tol(knots: np.ndarray) -> float:
    return 1e-9 * max(1.0, float(knots[-1] - knots[0]))


# ---------------------------------------------------------------------------
# parameterizations
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class StepParams:
    """Derivative ``f'(t) = sum_l theta_l 1{t <= z_l}`` of a monotone link.

    ``theta0 = inf`` gives the exact step function. A finite ``theta0``
    replaces each indicator by ``1 / (1 + exp(theta0 (t - z_l)))``; in
    particular ``theta0 = 0`` halves every term.
    """

    knots: np.ndarray = field(repr=False)
    theta: np.ndarray = field(repr=False)
    sign: str = "+"
    theta0: float = math.inf

    def __post_init__(self):
        z = np.asarray(self.knots, dtype=float)
        th = np.asarray(self.theta, dtype=float)
        if z.ndim != 1 or z.size < 1 or th.shape != z.shape:
            raise ValueError("knots and theta must be 1D arrays of equal length")
        if np.any(np.diff(z) <= 0):
            raise ValueError("knots must be strictly increasing")
        s = _sign_value(self.sign)
        if np.any(s * th < 0):
            raise ValueError(f"theta violates the sign constraint {self.sign!r}")
        if not (self.theta0 >= 0):
            raise ValueError("theta0 must be nonnegative")
        object.__setattr__(self, "knots", _frozen(z))
        object.__setattr__(self, "theta", _frozen(th))
        object.__setattr__(self, "theta0", float(self.theta0))

    @property
    def K(self) -> int:
        return self.knots.size

    @property
    def span(self) -> tuple[float, float]:
        return float(self.knots[0]), float(self.knots[-1])

    @property
    def is_step(self) -> bool:
        return math.isinf(self.theta0)

    def with_theta(self, theta) -> "StepParams":
        return StepParams(self.knots, theta, self.sign, self.theta0)

    def _tail_sums(self) -> np.ndarray:
        # tail[k] = sum_{l >= k} theta_l, tail[K] = 0
        return np.concatenate([np.cumsum(self.theta[::-1])[::-1], [0.0]])

    def fprime(self, t):
        t = np.asarray(t, dtype=float)
        if self.is_step:
            return self._tail_sums()[np.searchsorted(self.knots, t, side="left")]
        if self.theta0 == 0.0:
            return np.full(t.shape, 0.5 * self.theta.sum()) if t.ndim else 0.5 * self.theta.sum()
        s = expit(-self.theta0 * (t[..., None] - self.knots))
        return s @ self.theta

    def fsecond(self, t):
        """Second derivative (zero almost everywhere for the step form)."""
        t = np.asarray(t, dtype=float)
        if self.is_step or self.theta0 == 0.0:
            return np.zeros(t.shape)
        s = expit(-self.theta0 * (t[..., None] - self.knots))
        return -self.theta0 * ((s * (1.0 - s)) @ self.theta)

    def f(self, t):
        """Antiderivative of ``fprime`` vanishing at the first knot."""
        t = np.asarray(t, dtype=float)
        a = self.knots[0]
        if self.is_step:
            k = np.searchsorted(self.knots, t, side="left")
            head = np.concatenate([[0.0], np.cumsum(self.theta * (self.knots - a))])
            return head[k] + (t - a) * self._tail_sums()[k]
        if self.theta0 == 0.0:
            return 0.5 * self.theta.sum() * (t - a)

        def prim(s):
            u = self.theta0 * (s[..., None] - self.knots)
            return (s[..., None] - np.logaddexp(0.0, u) / self.theta0) @ self.theta

        return prim(t) - prim(np.asarray(a))

    def to_dict(self) -> dict:
        return {"knots": self.knots.tolist(), "theta": self.theta.tolist(), "sign": self.sign,
                "theta0": "inf" if self.is_step else self.theta0}

    @classmethod
    def from_dict(cls, d: dict) -> "StepParams":
        t0 = d.get("theta0", "inf")
        return cls(np.array(d["knots"]), np.array(d["theta"]), d.get("sign", "+"),
                   math.inf if t0 in ("inf", None) else float(t0))


@dataclass(frozen=True)
class PsiParams:
    """Derivative ``psi'(x) = x - sum_l vartheta_l 1{x >= z_l}``, ``vartheta >= 0``."""

    knots: np.ndarray = field(repr=False)
    vartheta: np.ndarray = field(repr=False)

    def __post_init__(self):
        z = np.asarray(self.knots, dtype=float)
        v = np.asarray(self.vartheta, dtype=float)
        if z.ndim != 1 or v.shape != z.shape or z.size < 1:
            raise ValueError("knots and vartheta must be 1D arrays of equal length")
        if np.any(np.diff(z) <= 0):
            raise ValueError("knots must be strictly increasing")
        if np.any(v < 0):
            raise ValueError("vartheta must be nonnegative")
        object.__setattr__(self, "knots", _frozen(z))
        object.__setattr__(self, "vartheta", _frozen(v))

    @property
    def K(self) -> int:
        return self.knots.size

    def _counts(self, x):
        return np.searchsorted(self.knots, x, side="right")

    def psi_prime(self, x):
        x = np.asarray(x, dtype=float)
        cs = np.concatenate([[0.0], np.cumsum(self.vartheta)])
        return x - cs[self._counts(x)]

    def psi(self, x):
        x = np.asarray(x, dtype=float)
        k = self._counts(x)
        cs = np.concatenate([[0.0], np.cumsum(self.vartheta)])
        csz = np.concatenate([[0.0], np.cumsum(self.vartheta * self.knots)])
        return 0.5 * x * x - (x * cs[k] - csz[k])

    def to_dict(self) -> dict:
        return {"knots": self.knots.tolist(), "vartheta": self.vartheta.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "PsiParams":
        return cls(np.array(d["knots"]), np.array(d["vartheta"]))


def default_psi_knots(grid: Grid1D, K: int = 100) -> np.ndarray:
    """Left cell edges of ``K`` equal cells covering the grid interval."""
    return grid.lo + np.arange(K) * (grid.hi - grid.lo) / K


def default_step_knots(potentials: np.ndarray, K: int = 100, pad: float = 0.01) -> np.ndarray:
    """``K`` equispaced knots over the range of ``+-potentials``, padded."""
    m = float(np.max(np.abs(potentials))) if np.size(potentials) else 0.0
    if m == 0.0:
        m = 1e-6
    m *= 1.0 + pad
    return np.linspace(-m, m, K)


def compose_values(f: StepParams, phi_values, check_span: bool = True):
    """Values of ``f (.) phi`` and the factor ``f'(+-phi)`` at each point.

    Returns ``(values, scale)`` such that the derivative of the composition is
    ``scale * phi'``.
    """
    s = _sign_value(f.sign) * np.asarray(phi_values, dtype=float)
    if check_span and s.size:
        lo, hi = f.span
        tol = _span_tol(f.knots)
        if s.min() < lo - tol or s.max() > hi + tol:
            raise KnotSpanError("knot span too small", float(s.min()), float(s.max()))
    vals = f.f(s)
    if f.sign == "-":
        vals = -vals
    return vals, f.fprime(s)


def circledcirc(f: StepParams, phi: Potential1D) -> Potential1D:
    """Sign-aware composition: ``f o phi`` for ``+``, ``-f o (-phi)`` for ``-``."""
    vals, scale = compose_values(f, phi.values)
    return Potential1D(phi.grid, vals, scale * phi.deriv, phi.reference)


def step_derivative_stats(f: StepParams, rng: tuple[float, float] | None = None,
                          discrete: bool = False, n_eval: int = 20001) -> tuple[float, float]:
    """Suprema of ``|f'|`` and ``|f''|`` over ``rng`` (default: knot span).

    For the exact step form ``|f''|`` is infinite whenever a jump lies inside
    the range. With ``discrete=True`` it is replaced by the steepest slope of
    the piecewise-linear interpolant through the knots, which is finite.
    """
    a, b = f.span if rng is None else (float(rng[0]), float(rng[1]))
    if not a <= b:
        raise ValueError("range must satisfy a <= b")
    if f.is_step:
        z = f.knots
        ka = int(np.searchsorted(z, a, side="left"))
        kb = int(np.searchsorted(z, b, side="left"))
        k1 = float(np.max(np.abs(f._tail_sums()[ka:kb + 1])))
        jumps = f.theta[ka:kb]
        if not np.any(jumps != 0):
            return k1, 0.0
        if not discrete:
            return k1, math.inf
        dz = np.diff(z)
        dz = np.concatenate([dz, dz[-1:]]) if dz.size else np.ones(1)
        return k1, float(np.max(np.abs(jumps) / dz[ka:kb]))
    t = np.union1d(np.linspace(a, b, n_eval), f.knots[(f.knots >= a) & (f.knots <= b)])
    return float(np.max(np.abs(f.fprime(t)))), float(np.max(np.abs(f.fsecond(t))))


# ---------------------------------------------------------------------------
# feasibility
# ---------------------------------------------------------------------------

def _nonneg(name, v, size=None):
    a = np.atleast_1d(np.asarray(v, dtype=float))
    if a.ndim != 1:
        raise ValueError(f"{name} must be one-dimensional")
    if size is not None and a.size != size:
        raise ValueError(f"{name} has length {a.size}, expected {size}")
    if np.any(np.isnan(a)) or np.any(a < 0):
        raise ValueError(f"{name} must be nonnegative")
    return _frozen(a)


@dataclass(frozen=True)
class FeasibilityConstants:
    """Data constants (eta, lam, gamma_minus, gamma_plus, l_bounds) and the
    parameter-class bounds (kappa1, kappa2, rho) they are checked against."""

    eta: np.ndarray
    lam: np.ndarray
    gamma_minus: np.ndarray
    gamma_plus: np.ndarray
    l_bounds: np.ndarray
    kappa1: np.ndarray | None = None
    kappa2: np.ndarray | None = None
    rho: np.ndarray | None = None

    def __post_init__(self):
        eta = _nonneg("eta", np.reshape(np.asarray(self.eta, dtype=float), -1))
        p = eta.size
        object.__setattr__(self, "eta", eta)
        for name in ("lam", "gamma_minus", "gamma_plus"):
            object.__setattr__(self, name, _nonneg(name, np.reshape(getattr(self, name), -1), p))
        lb = np.reshape(np.asarray(self.l_bounds, dtype=float), -1)
        q = lb.size
        object.__setattr__(self, "l_bounds", _nonneg("l_bounds", lb, q))
        for name, size in (("kappa1", p), ("kappa2", p), ("rho", q)):
            v = getattr(self, name)
            v = np.zeros(size) if v is None else np.reshape(np.asarray(v, dtype=float), -1)
            object.__setattr__(self, name, _nonneg(name, v, size))

    @property
    def p(self) -> int:
        return self.eta.size

    @property
    def q(self) -> int:
        return self.l_bounds.size

    @classmethod
    def zeros(cls, p: int, q: int) -> "FeasibilityConstants":
        z = np.zeros(p)
        return cls(z, z, z, z, np.zeros(q))

    def with_bounds(self, kappa1=None, kappa2=None, rho=None) -> "FeasibilityConstants":
        return FeasibilityConstants(self.eta, self.lam, self.gamma_minus, self.gamma_plus,
                                    self.l_bounds,
                                    self.kappa1 if kappa1 is None else kappa1,
                                    self.kappa2 if kappa2 is None else kappa2,
                                    self.rho if rho is None else rho)

    def gamma(self, delta: Sequence[str]) -> np.ndarray:
        return np.array([self.gamma_plus[j] if s == "+" else self.gamma_minus[j]
                         for j, s in enumerate(delta)], dtype=float)

    def max_kappa1(self, j: int, sign: str) -> float:
        """Largest uniform ``sup|f'|`` keeping ``kappa1 * gamma <= 1`` (kappa2 = 0)."""
        g = self.gamma_plus[j] if sign == "+" else self.gamma_minus[j]
        return math.inf if g == 0 else 1.0 / g

    def to_dict(self) -> dict:
        enc = lambda a: [("inf" if math.isinf(v) else v) for v in np.asarray(a).tolist()]
        return {"eta": enc(self.eta), "lambda": enc(self.lam),
                "gamma_minus": enc(self.gamma_minus), "gamma_plus": enc(self.gamma_plus),
                "l_bounds": enc(self.l_bounds), "kappa1": enc(self.kappa1),
                "kappa2": enc(self.kappa2), "rho": enc(self.rho)}

    @classmethod
    def from_dict(cls, d: dict) -> "FeasibilityConstants":
        dec = lambda a: np.array([math.inf if v == "inf" else float(v) for v in (a or [])], dtype=float)
        return cls(dec(d["eta"]), dec(d["lambda"]), dec(d["gamma_minus"]), dec(d["gamma_plus"]),
                   dec(d["l_bounds"]), dec(d.get("kappa1")) if d.get("kappa1") is not None else None,
                   dec(d.get("kappa2")) if d.get("kappa2") is not None else None,
                   dec(d.get("rho")) if d.get("rho") is not None else None)


def _safe_dot(a: np.ndarray, b: np.ndarray) -> float:
    # 0 * inf counts as 0: a zero constant never constrains an unbounded class
    prod = np.where((a == 0) | (b == 0), 0.0, a * b)
    return float(np.sum(prod))


def feasibility_lhs(c: FeasibilityConstants, delta: Sequence[str]) -> float:
    delta = tuple(delta)
    if len(delta) != c.p:
        raise ValueError(f"sign configuration has length {len(delta)}, expected {c.p}")
    for s in delta:
        _sign_value(s)
    return (_safe_dot(c.gamma(delta) + c.lam, c.kappa1) + _safe_dot(c.eta, c.kappa2)
            + _safe_dot(c.l_bounds, c.rho))


def check_feasibility(c: FeasibilityConstants, delta: Sequence[str]) -> tuple[bool, float]:
    """Evaluate ``(gamma_delta + lam).kappa1 + eta.kappa2 + l.rho <= 1``.

    Returns ``(ok, slack)`` with ``slack = 1 - lhs``.
    """
    slack = 1.0 - feasibility_lhs(c, delta)
    return bool(slack >= 0), slack


# ---------------------------------------------------------------------------
# dataset
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Dataset:
    """Responses, predictors and every cached quantity the loss needs.

    Array caches: ``phi`` and ``dphi`` have shape ``(p, n, N)``,
    ``response_maps`` is ``(n, N)`` and ``z`` is the centred ``(n, q)``
    covariate matrix.
    """

    grid: Grid1D
    responses: tuple
    nu_bar: Density1D
    phi: np.ndarray = field(repr=False)
    dphi: np.ndarray = field(repr=False)
    response_maps: np.ndarray = field(repr=False)
    scalars: np.ndarray = field(repr=False)
    dist_predictors: tuple = ()
    mu_bars: tuple = ()
    centering: str = "predictor"
    meta: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        n = len(self.responses)
        if n < 1:
            raise ValueError("dataset needs at least one record")
        N = self.grid.n
        phi = np.asarray(self.phi, dtype=float)
        dphi = np.asarray(self.dphi, dtype=float)
        if phi.ndim != 3 or phi.shape[1:] != (n, N) or dphi.shape != phi.shape:
            raise ValueError(f"potential caches must have shape (p, {n}, {N})")
        rm = np.asarray(self.response_maps, dtype=float)
        if rm.shape != (n, N):
            raise ValueError("response maps must have shape (n, N)")
        sc = np.asarray(self.scalars, dtype=float).reshape(n, -1)
        if self.centering not in ("predictor", "response"):
            raise ValueError("centering must be 'predictor' or 'response'")
        object.__setattr__(self, "responses", tuple(self.responses))
        object.__setattr__(self, "phi", _frozen(phi))
        object.__setattr__(self, "dphi", _frozen(dphi))
        object.__setattr__(self, "response_maps", _frozen(rm))
        object.__setattr__(self, "scalars", _frozen(sc))
        object.__setattr__(self, "dist_predictors", tuple(tuple(r) for r in self.dist_predictors))
        object.__setattr__(self, "mu_bars", tuple(self.mu_bars))

    @property
    def n(self) -> int:
        return len(self.responses)

    @property
    def p(self) -> int:
        return self.phi.shape[0]

    @property
    def q(self) -> int:
        return self.scalars.shape[1]

    @property
    def z_means(self) -> np.ndarray:
        return self.scalars.mean(axis=0) if self.n else np.zeros(self.q)

    @property
    def z(self) -> np.ndarray:
        return self.scalars - self.z_means

    @property
    def weights(self) -> np.ndarray:
        """Quadrature weights of the reference measure on the grid."""
        return self.grid.trapz_weights * self.nu_bar.values

    @property
    def support(self) -> np.ndarray:
        return self.nu_bar.values > SUPPORT_EPS

    def potential(self, j: int, i: int) -> Potential1D:
        return Potential1D(self.grid, self.phi[j, i], self.dphi[j, i])

    @classmethod
    def build(cls, responses, dist_predictors=None, scalars=None, *, centering="predictor",
              nu_bar: Density1D | None = None, mu_bars=None, meta=None) -> "Dataset":
        """Compute barycenters, potentials and response maps from raw densities.

        Parameters
        ----------
        responses : sequence of Density1D
            All on one grid; that grid carries the loss.
        dist_predictors : sequence of sequences of Density1D, optional
            ``n`` rows of ``p`` predictor densities. Predictors on another
            interval are mapped affinely onto the response interval.
        scalars : (n, q) array_like, optional
        centering : {"predictor", "response"}
            Measure the predictor potentials are centred against: their own
            barycenter, or the response barycenter.
        """
        responses = list(responses)
        n = len(responses)
        if n < 1:
            raise ValueError("dataset needs at least one record")
        grid = responses[0].grid
        for d in responses:
            if not d.grid.same_as(grid):
                raise DomainError("all responses must share one grid")
        rows = [list(r) for r in (dist_predictors or [[] for _ in range(n)])]
        if len(rows) != n:
            raise ValueError("need one predictor row per response")
        p = len(rows[0]) if rows else 0
        if any(len(r) != p for r in rows):
            raise ValueError("inconsistent number of distributional predictors")
        rows = [[d if d.grid.same_as(grid) else align_density(d, grid) for d in r] for r in rows]
        sc = np.zeros((n, 0)) if scalars is None else np.asarray(scalars, dtype=float).reshape(n, -1)
        nb = barycenter(responses) if nu_bar is None else nu_bar
        mbs = [barycenter([rows[i][j] for i in range(n)]) for j in range(p)] if mu_bars is None \
            else list(mu_bars)
        phi = np.zeros((p, n, grid.n))
        dphi = np.zeros((p, n, grid.n))
        for j in range(p):
            ref = mbs[j] if centering == "predictor" else nb
            for i in range(n):
                pot = potential_from_map(ot_map(mbs[j], rows[i][j]), ref)
                phi[j, i], dphi[j, i] = pot.values, pot.deriv
            if _is_degenerate(dphi[j], ref.values > SUPPORT_EPS):
                warnings.warn(f"predictor {j} is degenerate (all inputs equal); "
                              "its link function is not identifiable", stacklevel=2)
        rmaps = np.array([ot_map(nb, d).values for d in responses])
        return cls(grid, tuple(responses), nb, phi, dphi, rmaps, sc, tuple(map(tuple, rows)),
                   tuple(mbs), centering, dict(meta or {}))

    @classmethod
    def from_potentials(cls, grid, responses, nu_bar, phi, dphi, scalars=None, *,
                        response_maps=None, mu_bars=(), dist_predictors=(), centering="predictor",
                        meta=None) -> "Dataset":
        """Assemble a dataset from precomputed potential caches."""
        phi = np.asarray(phi, dtype=float)
        n = len(responses)
        if phi.ndim == 2:
            phi = phi[None]
            dphi = np.asarray(dphi, dtype=float)[None]
        if response_maps is None:
            response_maps = np.array([ot_map(nu_bar, d).values for d in responses])
        sc = np.zeros((n, 0)) if scalars is None else np.asarray(scalars, dtype=float).reshape(n, -1)
        return cls(grid, tuple(responses), nu_bar, phi, dphi, response_maps, sc,
                   tuple(map(tuple, dist_predictors)), tuple(mu_bars), centering, dict(meta or {}))


def _is_degenerate(dphi_j: np.ndarray, support: np.ndarray) -> bool:
    # quantile maps are arbitrary off the support, so only look inside it
    sup = support if np.any(support) else np.ones(dphi_j.shape[-1], dtype=bool)
    return bool(np.max(np.abs(dphi_j[:, sup])) < DEGENERATE_TOL)


def degenerate_predictors(data: Dataset) -> list:
    """Indices of predictors whose potentials vanish on the reference support."""
    return [j for j in range(data.p) if _is_degenerate(data.dphi[j], data.support)]


def estimate_constants(data: Dataset) -> FeasibilityConstants:
    """Empirical feasibility constants over the support of the reference measure.

    ``eta`` is the sup of the mean squared displacement, ``lam`` the sup of the
    root mean squared curvature, ``gamma_minus``/``gamma_plus`` the largest
    negative/positive curvature of any single potential, and ``l_bounds`` the
    largest absolute centred covariate.
    """
    p, q = data.p, data.q
    if data.n == 0:
        return FeasibilityConstants.zeros(p, q)
    sup = data.support
    if not np.any(sup):
        sup = np.ones(data.grid.n, dtype=bool)
    eta, lam, gm, gp = (np.zeros(p) for _ in range(4))
    for j in range(p):
        d = data.dphi[j][:, sup]
        curv = np.gradient(data.dphi[j], data.grid.h, axis=-1, edge_order=2)[:, sup]
        eta[j] = np.max(np.mean(d * d, axis=0))
        lam[j] = np.sqrt(np.max(np.mean(curv * curv, axis=0)))
        gm[j] = max(0.0, float(np.max(-curv)))
        gp[j] = max(0.0, float(np.max(curv)))
    lb = np.max(np.abs(data.z), axis=0) if q else np.zeros(0)
    return FeasibilityConstants(eta, lam, gm, gp, lb)


# ---------------------------------------------------------------------------
# fitted model
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class ModelSpec:
    """A fitted (or hand-built) regression model.

    ``intercepts`` and ``intercept_derivs`` hold the training averages of
    ``f_j (.) phi_ij`` and of its derivative on the grid, shape ``(p, N)``.
    """

    grid: Grid1D
    sign_config: tuple
    step_params: tuple
    psi_params: tuple
    constants: FeasibilityConstants
    intercepts: np.ndarray = field(repr=False)
    intercept_derivs: np.ndarray = field(repr=False)
    z_means: np.ndarray = field(repr=False)
    nu_bar: Density1D | None = field(default=None, repr=False)
    mu_bars: tuple = field(default=(), repr=False)
    centering: str = "predictor"

    def __post_init__(self):
        sc = tuple(self.sign_config)
        sp = tuple(self.step_params)
        if len(sc) != len(sp):
            raise ValueError("sign configuration and step parameters differ in length")
        for s, f in zip(sc, sp):
            if f.sign != s:
                raise ValueError("step parameter sign does not match the sign configuration")
        p, q, N = len(sp), len(self.psi_params), self.grid.n
        ic = np.asarray(self.intercepts, dtype=float).reshape(p, N)
        icd = np.asarray(self.intercept_derivs, dtype=float).reshape(p, N)
        zm = np.asarray(self.z_means, dtype=float).reshape(q)
        object.__setattr__(self, "sign_config", sc)
        object.__setattr__(self, "step_params", sp)
        object.__setattr__(self, "psi_params", tuple(self.psi_params))
        object.__setattr__(self, "intercepts", _frozen(ic))
        object.__setattr__(self, "intercept_derivs", _frozen(icd))
        object.__setattr__(self, "z_means", _frozen(zm))
        object.__setattr__(self, "mu_bars", tuple(self.mu_bars))

    @property
    def p(self) -> int:
        return len(self.step_params)

    @property
    def q(self) -> int:
        return len(self.psi_params)

    def parameter_vector(self) -> np.ndarray:
        parts = [f.theta for f in self.step_params] + [s.vartheta for s in self.psi_params]
        return np.concatenate(parts) if parts else np.zeros(0)

    @classmethod
    def from_data(cls, data: Dataset, step_params, psi_params=(),
                  constants: FeasibilityConstants | None = None) -> "ModelSpec":
        """Build a model whose intercepts and covariate means come from ``data``."""
        step_params = tuple(step_params)
        N = data.grid.n
        ic = np.zeros((len(step_params), N))
        icd = np.zeros((len(step_params), N))
        for j, f in enumerate(step_params):
            vals, scale = compose_values(f, data.phi[j])
            ic[j] = vals.mean(axis=0)
            icd[j] = (scale * data.dphi[j]).mean(axis=0)
        return cls(data.grid, tuple(f.sign for f in step_params), step_params, tuple(psi_params),
                   constants if constants is not None else estimate_constants(data),
                   ic, icd, data.z_means, data.nu_bar, data.mu_bars, data.centering)

    def to_dict(self) -> dict:
        return {
            "format": "kantoreg-model/1",
            "grid": self.grid.to_dict(),
            "p": self.p, "q": self.q,
            "centering": self.centering,
            "sign_config": list(self.sign_config),
            "step_params": [f.to_dict() for f in self.step_params],
            "psi_params": [s.to_dict() for s in self.psi_params],
            "constants": self.constants.to_dict(),
            "intercepts": self.intercepts.tolist(),
            "intercept_derivs": self.intercept_derivs.tolist(),
            "z_means": self.z_means.tolist(),
            "nu_bar": None if self.nu_bar is None else self.nu_bar.values.tolist(),
            "mu_bars": [m.values.tolist() for m in self.mu_bars],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        g = Grid1D.from_dict(d["grid"])
        return cls(g, tuple(d["sign_config"]),
                   tuple(StepParams.from_dict(x) for x in d["step_params"]),
                   tuple(PsiParams.from_dict(x) for x in d["psi_params"]),
                   FeasibilityConstants.from_dict(d["constants"]),
                   np.array(d["intercepts"], dtype=float).reshape(len(d["step_params"]), g.n),
                   np.array(d["intercept_derivs"], dtype=float).reshape(len(d["step_params"]), g.n),
                   np.array(d["z_means"], dtype=float),
                   None if d.get("nu_bar") is None else Density1D.normalized(g, d["nu_bar"]),
                   tuple(Density1D.normalized(g, m) for m in d.get("mu_bars", [])),
                   d.get("centering", "predictor"))


def model_potential(model: ModelSpec, phis, scalars) -> Potential1D:
    """Combined potential for given predictor potentials and raw covariates."""
    g = model.grid
    x = g.nodes
    vals = np.zeros(g.n)
    der = np.zeros(g.n)
    for j, (f, pot) in enumerate(zip(model.step_params, phis)):
        v, scale = compose_values(f, pot.values)
        vals += v - model.intercepts[j]
        der += scale * pot.deriv - model.intercept_derivs[j]
    zc = np.asarray(scalars, dtype=float).reshape(model.q) - model.z_means
    for k, s in enumerate(model.psi_params):
        vals += zc[k] * s.psi(x)
        der += zc[k] * s.psi_prime(x)
    return Potential1D(g, vals, der)


def predict(model: ModelSpec, dist_preds=(), scalar_preds=(), nu_bar: Density1D | None = None,
            mu_bars=None) -> tuple[Density1D, Potential1D]:
    """Predicted response density and the combined potential behind it.

    Raises
    ------
    NonMonotoneMapError
        If ``id - potential'`` decreases somewhere (infeasible parameters).
    KnotSpanError
        If a predictor potential leaves the fitted knot range.
    """
    nu_bar = model.nu_bar if nu_bar is None else nu_bar
    mu_bars = model.mu_bars if mu_bars is None else tuple(mu_bars)
    if nu_bar is None:
        raise ValueError("no reference measure supplied or stored in the model")
    dist_preds = list(dist_preds)
    if len(dist_preds) != model.p or len(mu_bars) != model.p:
        raise ValueError(f"model expects {model.p} distributional predictors")
    g = model.grid
    phis = []
    for j, d in enumerate(dist_preds):
        d = d if d.grid.same_as(g) else align_density(d, g)
        ref = mu_bars[j] if model.centering == "predictor" else nu_bar
        phis.append(potential_from_map(ot_map(mu_bars[j], d), ref))
    pot = model_potential(model, phis, scalar_preds)
    tmap = TransportMap1D(g, g.nodes - pot.deriv)
    bad = tmap.first_decrease()
    if bad is not None:
        raise NonMonotoneMapError("predicted map is not monotone", node=bad)
    return pushforward(nu_bar, tmap), pot
