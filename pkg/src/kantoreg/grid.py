"""Uniform 1D grids, densities on them, CDFs and quantiles."""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

MASS_TOL = 1e-9


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=float, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Grid1D:
    """Uniformly spaced nodes ``lo, lo + h, ..., hi``."""

    lo: float
    hi: float
    n: int

    def __post_init__(self):
        if not (np.isfinite(self.lo) and np.isfinite(self.hi)) or not self.lo < self.hi:
            raise ValueError(f"need lo < hi, got [{self.lo}, {self.hi}]")
        if int(self.n) != self.n or self.n < 2:
            raise ValueError(f"need at least 2 nodes, got {self.n}")
        object.__setattr__(self, "lo", float(self.lo))
        object.__setattr__(self, "hi", float(self.hi))
        object.__setattr__(self, "n", int(self.n))

    @property
    def h(self) -> float:
        return (self.hi - self.lo) / (self.n - 1)

    @cached_property
    def nodes(self) -> np.ndarray:
        x = self.lo + np.arange(self.n) * self.h
        x[-1] = self.hi
        x.setflags(write=False)
        return x

    @cached_property
    def trapz_weights(self) -> np.ndarray:
        w = np.full(self.n, self.h)
        w[0] = w[-1] = 0.5 * self.h
        w.setflags(write=False)
        return w

    def integrate(self, values) -> float | np.ndarray:
        """Trapezoid integral along the last axis."""
        return np.asarray(values, dtype=float) @ self.trapz_weights

    def same_as(self, other: "Grid1D", rtol: float = 1e-12) -> bool:
        scale = max(abs(self.lo), abs(self.hi), 1.0)
        return (self.n == other.n
                and abs(self.lo - other.lo) <= rtol * scale
                and abs(self.hi - other.hi) <= rtol * scale)

    def to_dict(self) -> dict:
        return {"lo": self.lo, "hi": self.hi, "n": self.n}

    @classmethod
    def from_dict(cls, d: dict) -> "Grid1D":
        return cls(float(d["lo"]), float(d["hi"]), int(d["n"]))

    @classmethod
    def from_nodes(cls, x, rtol: float = 1e-9) -> "Grid1D":
        """Recover a grid from node coordinates, checking uniform spacing."""
        x = np.asarray(x, dtype=float)
        if x.ndim != 1 or x.size < 2:
            raise ValueError("need at least two nodes")
        g = cls(x[0], x[-1], x.size)
        if np.max(np.abs(np.diff(x) - g.h)) > rtol * g.h:
            raise ValueError("nodes are not uniformly spaced")
        return g


@dataclass(frozen=True)
class Density1D:
    """Nonnegative nodal values with unit trapezoid mass."""

    grid: Grid1D
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.shape != (self.grid.n,):
            raise ValueError(f"expected {self.grid.n} values, got shape {v.shape}")
        if not np.all(np.isfinite(v)) or np.any(v < 0):
            raise ValueError("density values must be finite and nonnegative")
        mass = self.grid.integrate(v)
        if abs(mass - 1.0) > MASS_TOL:
            raise ValueError(f"density mass is {mass!r}, expected 1")
        object.__setattr__(self, "values", _frozen(v))

    @classmethod
    def normalized(cls, grid: Grid1D, values) -> "Density1D":
        v = np.clip(np.asarray(values, dtype=float), 0.0, None)
        mass = grid.integrate(v)
        if not mass > 0 or not np.isfinite(mass):
            raise ValueError("cannot normalise a density with zero mass")
        return cls(grid, v / mass)

    @classmethod
    def uniform(cls, grid: Grid1D) -> "Density1D":
        return cls.normalized(grid, np.ones(grid.n))

    def mean(self) -> float:
        return float(self.grid.integrate(self.values * self.grid.nodes))

    def expect(self, values) -> float | np.ndarray:
        """Integral of ``values`` (last axis on the grid) against this density."""
        return np.asarray(values, dtype=float) @ (self.grid.trapz_weights * self.values)


@dataclass(frozen=True)
class Cdf1D:
    grid: Grid1D
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.shape != (self.grid.n,):
            raise ValueError("cdf shape does not match grid")
        if v[0] != 0.0 or v[-1] != 1.0 or np.any(np.diff(v) < 0):
            raise ValueError("cdf must be nondecreasing from 0 to 1")
        object.__setattr__(self, "values", _frozen(v))

    def __call__(self, x):
        """Piecewise-linear evaluation off the nodes (0 left, 1 right)."""
        return np.interp(x, self.grid.nodes, self.values, left=0.0, right=1.0)


def truncated_normal(grid: Grid1D, mean: float, sd: float) -> Density1D:
    """Normal density restricted to the grid interval and renormalised."""
    x = grid.nodes
    return Density1D.normalized(grid, np.exp(-0.5 * ((x - mean) / sd) ** 2))


def density_from_samples(samples, grid: Grid1D, bandwidth: float) -> Density1D:
    """Gaussian kernel density estimate evaluated on ``grid``.

    Mass that falls outside ``[lo, hi]`` is discarded and the result is
    renormalised. Samples are sorted first, so the result does not depend on
    their order.
    """
    s = np.sort(np.asarray(samples, dtype=float).ravel())
    if s.size == 0:
        raise ValueError("empty sample")
    if not bandwidth > 0:
        raise ValueError("bandwidth must be positive")
    if not np.all(np.isfinite(s)):
        raise ValueError("samples must be finite")
    x = grid.nodes
    vals = np.empty(grid.n)
    rows = max(1, 2_000_000 // s.size)
    for a in range(0, grid.n, rows):
        u = (x[a:a + rows, None] - s[None, :]) / bandwidth
        vals[a:a + rows] = np.exp(-0.5 * u * u).sum(axis=1)
    vals /= s.size * bandwidth * np.sqrt(2 * np.pi)
    try:
        return Density1D.normalized(grid, vals)
    except ValueError:
        raise ValueError("samples carry no mass inside the grid") from None


def cdf(d: Density1D) -> Cdf1D:
    """Cumulative trapezoid integral, clamped monotone with pinned endpoints."""
    v = d.values
    c = np.concatenate([[0.0], np.cumsum(0.5 * (v[1:] + v[:-1]) * d.grid.h)])
    c = np.clip(np.maximum.accumulate(c) / c[-1], 0.0, 1.0)
    c[0], c[-1] = 0.0, 1.0
    return Cdf1D(d.grid, c)


def quantile(c: Cdf1D, u):
    """Piecewise-linear inverse of ``c``; flat stretches map to their left end.

    Accepts a scalar or an array of levels and returns the same shape.
    """
    u_arr = np.asarray(u, dtype=float)
    if np.any(~np.isfinite(u_arr)) or np.any((u_arr < 0) | (u_arr > 1)):
        raise ValueError("quantile level must lie in [0, 1]")
    F = c.values
    x = c.grid.nodes
    j = np.clip(np.searchsorted(F, u_arr, side="left"), 1, F.size - 1)
    f0 = F[j - 1]
    df = F[j] - f0
    with np.errstate(invalid="ignore", divide="ignore"):
        frac = np.where(df > 0, (u_arr - f0) / np.where(df > 0, df, 1.0), 0.0)
    frac = np.clip(frac, 0.0, 1.0)
    out = (1.0 - frac) * x[j - 1] + frac * x[j]
    return float(out) if out.ndim == 0 else out
