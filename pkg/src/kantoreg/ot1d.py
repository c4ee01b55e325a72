"""Closed-form optimal transport on the line.

Maps are quantile compositions, distances use quantile quadrature, and
potentials are integrated displacement fields.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError, NonMonotoneMapError
from .grid import Density1D, Grid1D, _frozen, cdf, quantile

MONO_TOL = 1e-12
N_QUAD = 2048


@dataclass(frozen=True)
class TransportMap1D:
    """Values of a map at the nodes of its source grid."""

    grid: Grid1D
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.shape != (self.grid.n,):
            raise ValueError("map shape does not match grid")
        object.__setattr__(self, "values", _frozen(v))

    @classmethod
    def identity(cls, grid: Grid1D) -> "TransportMap1D":
        return cls(grid, grid.nodes)

    def first_decrease(self, tol: float = MONO_TOL) -> int | None:
        """Index of the first node where the map drops, or None."""
        bad = np.flatnonzero(np.diff(self.values) < -tol * (self.grid.hi - self.grid.lo))
        return int(bad[0]) + 1 if bad.size else None

    def is_monotone(self, tol: float = MONO_TOL) -> bool:
        return self.first_decrease(tol) is None

    def displacement(self) -> np.ndarray:
        return self.values - self.grid.nodes

    def __call__(self, x):
        return np.interp(x, self.grid.nodes, self.values)


@dataclass(frozen=True)
class Potential1D:
    """Potential values and first derivative on a grid.

    ``reference`` is a free-form tag naming the measure the potential was
    centred against.
    """

    grid: Grid1D
    values: np.ndarray = field(repr=False)
    deriv: np.ndarray = field(repr=False)
    reference: str | None = None

    def __post_init__(self):
        for name in ("values", "deriv"):
            v = np.asarray(getattr(self, name), dtype=float)
            if v.shape != (self.grid.n,):
                raise ValueError(f"potential {name} shape does not match grid")
            object.__setattr__(self, name, _frozen(v))

    @classmethod
    def zero(cls, grid: Grid1D) -> "Potential1D":
        return cls(grid, np.zeros(grid.n), np.zeros(grid.n))

    def curvature(self) -> np.ndarray:
        """Second derivative from central differences of ``deriv``."""
        return np.gradient(self.deriv, self.grid.h, edge_order=2)

    def as_map(self) -> TransportMap1D:
        return TransportMap1D(self.grid, self.grid.nodes - self.deriv)


def _check_interval(a: Grid1D, b: Grid1D):
    scale = max(abs(a.lo), abs(a.hi), abs(b.lo), abs(b.hi), 1.0)
    if abs(a.lo - b.lo) > 1e-12 * scale or abs(a.hi - b.hi) > 1e-12 * scale:
        raise DomainError(f"mismatched domains [{a.lo}, {a.hi}] and [{b.lo}, {b.hi}]")


def align_density(d: Density1D, grid: Grid1D) -> Density1D:
    """Push ``d`` through the affine map sending its interval onto ``grid``'s.

    This is the support alignment used when source and target live on
    different intervals.
    """
    g = d.grid
    scale = (g.hi - g.lo) / (grid.hi - grid.lo)
    back = g.lo + (grid.nodes - grid.lo) * scale
    return Density1D.normalized(grid, np.interp(back, g.nodes, d.values) * scale)


def ot_map(source: Density1D, target: Density1D, align: bool = False) -> TransportMap1D:
    """Monotone rearrangement ``T = Q_target o F_source`` at the source nodes.

    Parameters
    ----------
    source, target : Density1D
        Must share an interval unless ``align`` is set, in which case the
        target is first mapped affinely onto the source interval.
    """
    try:
        _check_interval(source.grid, target.grid)
    except DomainError:
        if not align:
            raise
        target = align_density(target, source.grid)
    return TransportMap1D(source.grid, quantile(cdf(target), cdf(source).values))


def _quantiles(d: Density1D, n_quad: int) -> np.ndarray:
    u = (np.arange(n_quad) + 0.5) / n_quad
    return quantile(cdf(d), u)


def w2(a: Density1D, b: Density1D, n_quad: int = N_QUAD) -> float:
    """Quadratic Wasserstein distance by midpoint quadrature in quantile space."""
    _check_interval(a.grid, b.grid)
    diff = _quantiles(a, n_quad) - _quantiles(b, n_quad)
    return float(np.sqrt(np.mean(diff * diff)))


def potential_from_map(tmap: TransportMap1D, reference: Density1D,
                       reference_id: str | None = None) -> Potential1D:
    """Integrate ``id - T`` and centre the result against ``reference``."""
    if not tmap.grid.same_as(reference.grid):
        raise DomainError("map and reference must share a grid")
    bad = tmap.first_decrease()
    if bad is not None:
        raise NonMonotoneMapError("not cyclically monotone", node=bad)
    g = tmap.grid
    deriv = g.nodes - tmap.values
    vals = np.concatenate([[0.0], np.cumsum(0.5 * (deriv[1:] + deriv[:-1]) * g.h)])
    vals -= reference.expect(vals)
    return Potential1D(g, vals, deriv, reference_id)


def pushforward(reference: Density1D, tmap: TransportMap1D,
                domain_tol: float | None = None) -> Density1D:
    """Density of ``T # reference`` on the reference grid.

    Uses the change of variables ``rho(T^{-1} y) / T'(T^{-1} y)``, which is
    exact for affine maps, then renormalises. Values of ``T`` within
    ``domain_tol`` (default one cell) outside the interval are clipped;
    larger excursions raise.
    """
    g = reference.grid
    if not tmap.grid.same_as(g):
        raise DomainError("map and reference must share a grid")
    tol = g.h if domain_tol is None else domain_tol
    T = tmap.values
    if T.min() < g.lo - tol or T.max() > g.hi + tol:
        raise DomainError(f"map leaves the domain: range [{T.min():.6g}, {T.max():.6g}] "
                          f"vs [{g.lo:.6g}, {g.hi:.6g}]")
    bad = tmap.first_decrease()
    if bad is not None:
        raise NonMonotoneMapError("not cyclically monotone", node=bad)
    T = np.maximum.accumulate(np.clip(T, g.lo, g.hi))
    x = g.nodes
    y = g.nodes
    pre = np.interp(y, T, x)
    slope = np.interp(pre, x, np.gradient(T, g.h, edge_order=2 if g.n > 2 else 1))
    rho = np.interp(pre, x, reference.values)
    inside = (y >= T[0]) & (y <= T[-1])
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(inside & (rho > 0), rho / np.maximum(slope, 1e-12), 0.0)
    if not np.any(out > 0):
        # the whole mass collapsed between two nodes: put it on the nearest one
        out = np.zeros(g.n)
        out[int(np.clip(np.rint((reference.expect(T) - g.lo) / g.h), 0, g.n - 1))] = 1.0
    return Density1D.normalized(g, out)


def barycenter(ds, weights=None) -> Density1D:
    """Weighted Wasserstein barycenter of densities on a common grid.

    The barycenter's quantile function is the weighted mean of the inputs'
    quantile functions; it is realised as the pushforward of the first input
    through the averaged monotone map.
    """
    ds = list(ds)
    if not ds:
        raise ValueError("barycenter of an empty list")
    if weights is None:
        w = np.full(len(ds), 1.0 / len(ds))
    else:
        w = np.asarray(weights, dtype=float)
        if w.shape != (len(ds),) or np.any(w < 0):
            raise ValueError("weights must be nonnegative, one per density")
        if abs(w.sum() - 1.0) > 1e-9:
            raise ValueError(f"weights sum to {w.sum()!r}, expected 1")
    ref = ds[0]
    for d in ds[1:]:
        if not d.grid.same_as(ref.grid):
            raise DomainError("barycenter inputs must share a grid")
    avg = sum(wi * ot_map(ref, d).values for wi, d in zip(w, ds))
    return pushforward(ref, TransportMap1D(ref.grid, avg))
