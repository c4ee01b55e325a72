"""Transport on small 2D grids: brute-force c-transform, dual ascent solver,
splatting pushforward, fixed-point barycenters and the 2D regression fit."""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.fft import dctn, idctn
from scipy.ndimage import gaussian_filter

from ._kernels import c_transform_kernel, grid_c_transform_kernel, splat_kernel
from .errors import DomainError
from .grid import _frozen

MAX_CELLS = 64 * 64


@dataclass(frozen=True)
class Grid2D:
    """Uniform cell-centred tensor grid on ``[x_lo, x_hi] x [y_lo, y_hi]``."""

    x_lo: float
    x_hi: float
    y_lo: float
    y_hi: float
    nx: int
    ny: int

    def __post_init__(self):
        if not (self.x_lo < self.x_hi and self.y_lo < self.y_hi):
            raise ValueError("empty grid rectangle")
        if int(self.nx) < 2 or int(self.ny) < 2:
            raise ValueError("need at least 2 cells per axis")
        for k in ("x_lo", "x_hi", "y_lo", "y_hi"):
            object.__setattr__(self, k, float(getattr(self, k)))
        object.__setattr__(self, "nx", int(self.nx))
        object.__setattr__(self, "ny", int(self.ny))

    @classmethod
    def unit(cls, n: int, m: int | None = None) -> "Grid2D":
        return cls(0.0, 1.0, 0.0, 1.0, n, n if m is None else m)

    @property
    def hx(self) -> float:
        return (self.x_hi - self.x_lo) / self.nx

    @property
    def hy(self) -> float:
        return (self.y_hi - self.y_lo) / self.ny

    @property
    def cell_area(self) -> float:
        return self.hx * self.hy

    @property
    def shape(self) -> tuple[int, int]:
        return (self.nx, self.ny)

    @property
    def size(self) -> int:
        return self.nx * self.ny

    @property
    def xc(self) -> np.ndarray:
        return self.x_lo + (np.arange(self.nx) + 0.5) * self.hx

    @property
    def yc(self) -> np.ndarray:
        return self.y_lo + (np.arange(self.ny) + 0.5) * self.hy

    def mesh(self):
        return np.meshgrid(self.xc, self.yc, indexing="ij")

    def points(self) -> np.ndarray:
        X, Y = self.mesh()
        return np.column_stack([X.ravel(), Y.ravel()])

    def to_index(self, x, y):
        """Fractional cell-centre index coordinates of physical points."""
        return (np.asarray(x) - self.x_lo) / self.hx - 0.5, (np.asarray(y) - self.y_lo) / self.hy - 0.5

    def to_dict(self) -> dict:
        return {"x_lo": self.x_lo, "x_hi": self.x_hi, "y_lo": self.y_lo, "y_hi": self.y_hi,
                "nx": self.nx, "ny": self.ny}

    @classmethod
    def from_dict(cls, d: dict) -> "Grid2D":
        return cls(d["x_lo"], d["x_hi"], d["y_lo"], d["y_hi"], d["nx"], d["ny"])

    @classmethod
    def from_centers(cls, xc, yc) -> "Grid2D":
        xc, yc = np.asarray(xc, dtype=float), np.asarray(yc, dtype=float)
        hx, hy = xc[1] - xc[0], yc[1] - yc[0]
        return cls(xc[0] - hx / 2, xc[-1] + hx / 2, yc[0] - hy / 2, yc[-1] + hy / 2, xc.size, yc.size)


@dataclass(frozen=True)
class Density2D:
    grid: Grid2D
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.shape != self.grid.shape:
            raise ValueError("density shape does not match grid")
        if not np.all(np.isfinite(v)) or np.any(v < 0):
            raise ValueError("density values must be finite and nonnegative")
        mass = v.sum() * self.grid.cell_area
        if abs(mass - 1.0) > 1e-9:
            raise ValueError(f"density mass is {mass!r}, expected 1")
        object.__setattr__(self, "values", _frozen(v))

    @classmethod
    def normalized(cls, grid: Grid2D, values) -> "Density2D":
        v = np.clip(np.asarray(values, dtype=float), 0.0, None)
        s = v.sum() * grid.cell_area
        if not s > 0:
            raise ValueError("cannot normalise a density with zero mass")
        return cls(grid, v / s)

    @property
    def masses(self) -> np.ndarray:
        return self.values * self.grid.cell_area

    def center_of_mass(self) -> np.ndarray:
        X, Y = self.grid.mesh()
        m = self.masses
        return np.array([np.sum(m * X), np.sum(m * Y)])


def smooth_histogram(points, grid: Grid2D, sigma_cells: float = 1.0, weights=None) -> Density2D:
    """2D histogram of sample points smoothed by a Gaussian filter and renormalised."""
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    H, _, _ = np.histogram2d(pts[:, 0], pts[:, 1], bins=[grid.nx, grid.ny],
                             range=[[grid.x_lo, grid.x_hi], [grid.y_lo, grid.y_hi]],
                             weights=weights)
    if sigma_cells > 0:
        H = gaussian_filter(H, sigma_cells, mode="constant")
    return Density2D.normalized(grid, H)


@dataclass(frozen=True)
class Potential2D:
    grid: Grid2D
    values: np.ndarray = field(repr=False)
    grad: np.ndarray = field(repr=False)

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        g = np.asarray(self.grad, dtype=float)
        if v.shape != self.grid.shape or g.shape != self.grid.shape + (2,):
            raise ValueError("potential arrays do not match grid")
        object.__setattr__(self, "values", _frozen(v))
        object.__setattr__(self, "grad", _frozen(g))

    @classmethod
    def from_values(cls, grid: Grid2D, values, support=None) -> "Potential2D":
        """Gradient by central differences, one-sided at the edges.

        With a boolean ``support`` mask, cells on the rim of the support take
        the one-sided difference pointing inwards, so kinks of the potential
        just outside the support do not leak into the gradient.
        """
        v = np.asarray(values, dtype=float)
        gx, gy = np.gradient(v, grid.hx, grid.hy)
        if support is not None:
            gx = _support_diff(v, gx, np.asarray(support, bool), grid.hx, 0)
            gy = _support_diff(v, gy, np.asarray(support, bool), grid.hy, 1)
        return cls(grid, v, np.stack([gx, gy], axis=-1))

    def map(self) -> "TransportField2D":
        X, Y = self.grid.mesh()
        return TransportField2D(self.grid, np.stack([X - self.grad[..., 0], Y - self.grad[..., 1]], -1))


@dataclass(frozen=True)
class TransportField2D:
    """Mapped location of every cell centre, shape ``(nx, ny, 2)``."""

    grid: Grid2D
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.shape != self.grid.shape + (2,):
            raise ValueError("field shape does not match grid")
        object.__setattr__(self, "values", _frozen(v))

    @classmethod
    def identity(cls, grid: Grid2D) -> "TransportField2D":
        X, Y = grid.mesh()
        return cls(grid, np.stack([X, Y], axis=-1))

    def displacement(self) -> np.ndarray:
        X, Y = self.grid.mesh()
        return self.values - np.stack([X, Y], axis=-1)


def _support_diff(v, central, support, h, axis):
    vm = np.moveaxis(v, axis, 0)
    sm = np.moveaxis(support, axis, 0)
    out = np.moveaxis(central.copy(), axis, 0)
    fwd = np.full(vm.shape, np.nan)
    bwd = np.full(vm.shape, np.nan)
    fwd[:-1] = np.where(sm[1:], (vm[1:] - vm[:-1]) / h, np.nan)
    bwd[1:] = np.where(sm[:-1], (vm[1:] - vm[:-1]) / h, np.nan)
    has_f, has_b = ~np.isnan(fwd), ~np.isnan(bwd)
    both = has_f & has_b
    out[both] = 0.5 * (fwd[both] + bwd[both])
    out[has_f & ~has_b] = fwd[has_f & ~has_b]
    out[has_b & ~has_f] = bwd[has_b & ~has_f]
    return np.moveaxis(out, 0, axis)


def support_mask(d: "Density2D", rel: float = 1e-9) -> np.ndarray:
    return d.values > rel * d.values.max()


def _check_size(grid: Grid2D):
    if grid.size > MAX_CELLS:
        raise ValueError(f"grid has {grid.size} cells; the brute-force solver is capped at 64x64")


def c_transform_values(src: Grid2D, phi_values, tgt: Grid2D):
    """Values and argmin (flat source index) of the c-transform on ``tgt``."""
    vals, arg = c_transform_kernel(src.points(), np.asarray(phi_values, dtype=float).ravel(),
                                   tgt.points())
    return vals.reshape(tgt.shape), arg.reshape(tgt.shape)


def c_transform(phi: Potential2D, target_grid: Grid2D | None = None) -> Potential2D:
    """``phi^c(y) = min_x |x - y|^2 / 2 - phi(x)`` over all source cells."""
    tgt = phi.grid if target_grid is None else target_grid
    vals, _ = c_transform_values(phi.grid, phi.values, tgt)
    return Potential2D.from_values(tgt, vals)


def _laplace_inverse(g: np.ndarray) -> np.ndarray:
    # Neumann inverse of the 5-point Laplacian, zero-mean part only
    nx, ny = g.shape
    G = dctn(g, type=2, norm="ortho")
    lx = 2.0 - 2.0 * np.cos(np.pi * np.arange(nx) / nx)
    ly = 2.0 - 2.0 * np.cos(np.pi * np.arange(ny) / ny)
    den = lx[:, None] + ly[None, :]
    den[0, 0] = np.inf
    return idctn(G / den, type=2, norm="ortho")


@dataclass
class OTSolution2D:
    """Dual solution; iterating yields ``(potential, map)``."""

    potential: Potential2D
    map: TransportField2D
    dual_value: float
    dual_trace: np.ndarray
    iterations: int
    converged: bool
    dual_iterate: np.ndarray | None = None

    @property
    def w2(self) -> float:
        return math.sqrt(max(0.0, 2.0 * self.dual_value))

    def __iter__(self):
        yield self.potential
        yield self.map


def ot_solve_2d(mu: Density2D, nu: Density2D, iters: int = 500, step: float | None = None,
                tol: float = 1e-10, sigma: float = 1.0, precondition: str = "laplace",
                init: np.ndarray | None = None, envelope: bool = False,
                map_eps: float = 0.1) -> OTSolution2D:
    """Kantorovich dual ascent for the quadratic cost on a common grid.

    The ascent direction is ``mu - S#nu`` (``S`` sends each target cell to
    its c-transform minimiser), preconditioned by the Neumann inverse
    Laplacian (``precondition="laplace"``) or by a Gaussian filter of
    ``sigma`` cells (``"gaussian"``, slower to converge on smooth blobs).
    Steps that would lower the dual are rejected and the step halved, so
    the dual trace never decreases. With ``envelope=True`` every accepted
    iterate is replaced by its double c-transform. The returned potential
    is the double c-transform of the final iterate when that does not lower
    the dual, centred so that its integral against ``mu`` vanishes; the map
    is ``x - grad phi`` with support-aware differences.
    """
    g = mu.grid
    if nu.grid != g:
        raise DomainError("both densities must live on the same grid")
    _check_size(g)
    m = mu.masses
    nm = nu.masses.ravel()
    if np.sum(np.minimum(m, nu.masses)) == 0.0 and np.sum(
            gaussian_filter(m, 1.0) * gaussian_filter(nu.masses, 1.0)) == 0.0:
        warnings.warn("supports of the two densities do not overlap", stacklevel=2)
    N = g.size
    h2 = min(g.hx, g.hy) ** 2
    xc, yc = g.xc, g.yc

    def evaluate(phi):
        vals, arg = grid_c_transform_kernel(phi, xc, yc)
        return float(np.sum(phi * m) + vals.ravel() @ nm), arg.ravel()

    phi = np.zeros(g.shape) if init is None else np.array(init, dtype=float).reshape(g.shape)
    D, arg = evaluate(phi)
    trace = [D]
    tau = step
    converged = False
    stall = 0
    it = 0
    for it in range(1, int(iters) + 1):
        grad = m - np.bincount(arg, weights=nm, minlength=N).reshape(g.shape)
        if precondition == "laplace":
            d = _laplace_inverse(grad)
        elif sigma > 0:
            d = gaussian_filter(grad, sigma, mode="reflect")
        else:
            d = grad
        dmax = float(np.max(np.abs(d)))
        if dmax == 0.0:
            converged = True
            break
        if tau is None:
            tau = 0.5 * h2 / dmax
        accepted = False
        for _ in range(40):
            trial = phi + tau * d
            Dt, at = evaluate(trial)
            if Dt >= D:
                accepted = True
                break
            tau *= 0.5
        if not accepted:
            converged = True
            break
        if envelope:
            # phi^cc >= phi with the same c-transform, so the dual cannot drop
            phic, _ = grid_c_transform_kernel(trial, xc, yc)
            env, _ = grid_c_transform_kernel(phic, xc, yc)
            De, ae = evaluate(env)
            if De >= Dt:
                trial, Dt, at = env, De, ae
        gain = Dt - D
        phi, D, arg = trial, Dt, at
        trace.append(D)
        tau *= 1.3
        stall = stall + 1 if gain <= tol * max(abs(D), h2) else 0
        if stall >= 5:
            converged = True
            break
    # c-concave envelope: phi^cc >= phi, same c-transform, dual can only grow
    phic, _ = grid_c_transform_kernel(phi, xc, yc)
    phicc, _ = grid_c_transform_kernel(phic, xc, yc)
    Dcc, _ = evaluate(phicc)
    if Dcc >= D:
        phi, D = phicc, Dcc
    else:
        phic = grid_c_transform_kernel(phi, xc, yc)[0]
    # read the map off a smoothed envelope restricted to supp(nu); near-ties of
    # the discrete argmin get averaged instead of picked arbitrarily
    vals, T = _soft_envelope(g, phic, nu.masses, map_eps * h2)
    shift = np.sum(vals * m)
    X, Y = g.mesh()
    pot = Potential2D(g, vals - shift, np.stack([X - T[..., 0], Y - T[..., 1]], -1))
    return OTSolution2D(pot, TransportField2D(g, T), D, np.array(trace + [D]), it, converged,
                        phi - np.sum(phi * m))


def _soft_envelope(g: Grid2D, phic, nu_mass, eps, chunk=512):
    """``-eps log sum_y nu_y exp(-(c(x, y) - phic(y)) / eps)`` and its c-argmin mean."""
    P = g.points()
    with np.errstate(divide="ignore"):
        lw = np.log(np.asarray(nu_mass, dtype=float).ravel())
    b = phic.ravel() / eps + lw
    keep = np.isfinite(b)
    P2, b = P[keep], b[keep]
    vals = np.empty(g.size)
    T = np.empty((g.size, 2))
    for s0 in range(0, g.size, chunk):
        x = P[s0:s0 + chunk]
        a = b[None, :] - 0.5 * ((x[:, None, 0] - P2[None, :, 0]) ** 2
                                + (x[:, None, 1] - P2[None, :, 1]) ** 2) / eps
        top = a.max(axis=1, keepdims=True)
        w = np.exp(a - top)
        tot = w.sum(axis=1)
        vals[s0:s0 + chunk] = -eps * (top[:, 0] + np.log(tot))
        T[s0:s0 + chunk] = (w @ P2) / tot[:, None]
    return vals.reshape(g.shape), T.reshape(g.shape + (2,))


def w2_2d(mu: Density2D, nu: Density2D, **kw) -> float:
    return ot_solve_2d(mu, nu, **kw).w2


def _field_values(field_or_array, grid: Grid2D) -> np.ndarray:
    v = field_or_array.values if isinstance(field_or_array, TransportField2D) else field_or_array
    v = np.asarray(v, dtype=float)
    if v.shape != grid.shape + (2,):
        raise ValueError("map field shape does not match grid")
    return v


def pushforward_2d(reference: Density2D, field, warn: bool = True) -> Density2D:
    """Move each cell's mass to its mapped location with bilinear weights."""
    g = reference.grid
    T = _field_values(field, g)
    px, py = g.to_index(T[..., 0], T[..., 1])
    cx = np.clip(px, 0.0, g.nx - 1.0)
    cy = np.clip(py, 0.0, g.ny - 1.0)
    mass = reference.masses
    moved = (np.abs(cx - px) + np.abs(cy - py)) > 0.5
    if warn and np.any(moved & (mass > 0)):
        warnings.warn("pushforward clamped mapped points into the grid hull", stacklevel=2)
    out = splat_kernel(cx, cy, mass, g.nx, g.ny)
    return Density2D.normalized(g, out / g.cell_area)


def interpolate_field(grid: Grid2D, arr: np.ndarray, x, y) -> np.ndarray:
    """Bilinear interpolation of a cell-centred array (trailing dims allowed)."""
    px, py = grid.to_index(x, y)
    px = np.clip(px, 0.0, grid.nx - 1.0)
    py = np.clip(py, 0.0, grid.ny - 1.0)
    i0 = np.minimum(np.floor(px).astype(int), grid.nx - 2)
    j0 = np.minimum(np.floor(py).astype(int), grid.ny - 2)
    fx = (px - i0)[..., None] if arr.ndim > 2 else px - i0
    fy = (py - j0)[..., None] if arr.ndim > 2 else py - j0
    return ((1 - fx) * (1 - fy) * arr[i0, j0] + fx * (1 - fy) * arr[i0 + 1, j0]
            + (1 - fx) * fy * arr[i0, j0 + 1] + fx * fy * arr[i0 + 1, j0 + 1])


def barycenter_2d(ds, iters: int = 10, tol: float | None = None, solver_kw=None,
                  return_info: bool = False):
    """Fixed-point barycenter ``w <- (mean_i T_{w -> d_i}) # w`` from the first input.

    Stops once the mean displacement over cells carrying mass is at most
    ``tol`` (default half a cell) in sup-norm.
    """
    ds = list(ds)
    if not ds:
        raise ValueError("barycenter of an empty list")
    g = ds[0].grid
    if any(d.grid != g for d in ds):
        raise DomainError("barycenter inputs must share a grid")
    tol = 0.5 * max(g.hx, g.hy) if tol is None else tol
    kw = dict(solver_kw or {})
    w = ds[0]
    if all(np.array_equal(d.values, w.values) for d in ds[1:]):
        return (w, {"iterations": 0, "residual": 0.0}) if return_info else w
    resid = math.inf
    it = 0
    for it in range(1, int(iters) + 1):
        maps = [ot_solve_2d(w, d, **kw).map.values for d in ds]
        mean_map = np.mean(maps, axis=0)
        disp = mean_map - TransportField2D.identity(g).values
        mask = w.values * g.cell_area > 1e-6
        resid = float(np.max(np.linalg.norm(disp[mask], axis=-1))) if np.any(mask) else 0.0
        if resid <= tol:
            break
        w = pushforward_2d(w, mean_map, warn=False)
    info = {"iterations": it, "residual": resid}
    return (w, info) if return_info else w


def mean_displacement(w: Density2D, ds, **kw) -> np.ndarray:
    """Average displacement field ``mean_i (T_{w -> d_i} - id)``."""
    return np.mean([ot_solve_2d(w, d, **kw).map.displacement() for d in ds], axis=0)


def circledcirc_2d(f, phi: Potential2D) -> Potential2D:
    """Sign-aware composition on a 2D potential; the gradient is rescaled pointwise."""
    from .model import compose_values

    vals, scale = compose_values(f, phi.values)
    return Potential2D(phi.grid, vals, scale[..., None] * phi.grad)


# ---------------------------------------------------------------------------
# fixtures
# ---------------------------------------------------------------------------

def disk_density(grid: Grid2D, center, diameter: float, supersample: int = 8) -> Density2D:
    """Uniform disk rasterised with cell-coverage anti-aliasing."""
    s = int(supersample)
    off = (np.arange(s) + 0.5) / s - 0.5
    X, Y = grid.mesh()
    r2 = (0.5 * diameter) ** 2
    cov = np.zeros(grid.shape)
    for ox in off:
        for oy in off:
            cov += ((X + ox * grid.hx - center[0]) ** 2 + (Y + oy * grid.hy - center[1]) ** 2) <= r2
    if cov.sum() == 0:
        raise ValueError("disk is smaller than the sampling resolution")
    return Density2D.normalized(grid, cov)


def gaussian_blob(grid: Grid2D, center, sd: float) -> Density2D:
    X, Y = grid.mesh()
    return Density2D.normalized(grid, np.exp(-((X - center[0]) ** 2 + (Y - center[1]) ** 2)
                                             / (2 * sd * sd)))


# ---------------------------------------------------------------------------
# regression on 2D distributional predictors
# ---------------------------------------------------------------------------

SUPPORT_MASS = 1e-12


@dataclass(frozen=True, eq=False)
class Dataset2D:
    """2D responses and predictor potentials.

    ``phi`` has shape ``(p, n, nx, ny)`` and ``grad`` ``(p, n, nx, ny, 2)``;
    potential ``i, j`` is centred against the predictor barycenter ``mu_bars[j]``.
    """

    grid: Grid2D
    responses: tuple
    nu_bar: Density2D
    phi: np.ndarray = field(repr=False)
    grad: np.ndarray = field(repr=False)
    mu_bars: tuple = ()
    meta: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        n = len(self.responses)
        if n < 1:
            raise ValueError("dataset needs at least one record")
        phi = np.asarray(self.phi, dtype=float)
        grad = np.asarray(self.grad, dtype=float)
        if phi.ndim != 4 or phi.shape[1:] != (n,) + self.grid.shape or grad.shape != phi.shape + (2,):
            raise ValueError("potential caches do not match (p, n, nx, ny)")
        object.__setattr__(self, "responses", tuple(self.responses))
        object.__setattr__(self, "phi", _frozen(phi))
        object.__setattr__(self, "grad", _frozen(grad))
        object.__setattr__(self, "mu_bars", tuple(self.mu_bars))

    @property
    def n(self) -> int:
        return len(self.responses)

    @property
    def p(self) -> int:
        return self.phi.shape[0]

    @property
    def weights(self) -> np.ndarray:
        return self.nu_bar.masses

    @property
    def support(self) -> np.ndarray:
        return self.nu_bar.masses > SUPPORT_MASS

    @classmethod
    def build(cls, responses, dist_predictors, nu_bar: Density2D | None = None,
              mu_bars=None, solver_kw=None, meta=None) -> "Dataset2D":
        responses = list(responses)
        preds = [list(r) for r in dist_predictors]
        n = len(responses)
        if n < 1 or len(preds) != n:
            raise ValueError("need one predictor list per response")
        p = len(preds[0])
        if p < 1 or any(len(r) != p for r in preds):
            raise ValueError("every record needs the same, nonzero number of predictors")
        g = responses[0].grid
        _check_size(g)
        for d in responses + [x for r in preds for x in r]:
            if d.grid != g:
                raise DomainError("all 2D densities must share one grid")
        kw = dict(solver_kw or {})
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            nb = nu_bar if nu_bar is not None else barycenter_2d(responses, solver_kw=kw)
            mbs = list(mu_bars) if mu_bars is not None else \
                [barycenter_2d([r[j] for r in preds], solver_kw=kw) for j in range(p)]
            phi = np.zeros((p, n) + g.shape)
            grad = np.zeros((p, n) + g.shape + (2,))
            for j in range(p):
                for i in range(n):
                    pot = ot_solve_2d(mbs[j], preds[i][j], **kw).potential
                    phi[j, i] = pot.values
                    grad[j, i] = pot.grad
        return cls(g, tuple(responses), nb, phi, grad, tuple(mbs), dict(meta or {}))


def _support_knots(data: Dataset2D, j: int, K: int) -> np.ndarray:
    from .model import default_step_knots

    return default_step_knots(data.phi[j][:, data.support], K)


def _level_scales(step_params, phi_sup):
    """``f_j'(+-phi)`` on the support cells, shape ``(p, n, S)``."""
    from .model import compose_values

    return np.stack([compose_values(f, phi_sup[j])[1] for j, f in enumerate(step_params)])


@dataclass(frozen=True, eq=False)
class ModelSpec2D:
    grid: Grid2D
    sign_config: tuple
    step_params: tuple
    intercept_grad: np.ndarray = field(repr=False)
    nu_bar: Density2D | None = field(default=None, repr=False)
    mu_bars: tuple = field(default=(), repr=False)

    @property
    def p(self) -> int:
        return len(self.step_params)

    def parameter_vector(self) -> np.ndarray:
        return np.concatenate([f.theta for f in self.step_params])

    @classmethod
    def from_data(cls, data: Dataset2D, step_params) -> "ModelSpec2D":
        step_params = tuple(step_params)
        sup = data.support
        ic = np.zeros((data.p,) + data.grid.shape + (2,))
        sc = _level_scales(step_params, data.phi[:, :, sup])
        for j in range(data.p):
            ic[j][sup] = np.mean(sc[j][..., None] * data.grad[j][:, sup], axis=0)
        return cls(data.grid, tuple(f.sign for f in step_params), step_params, ic,
                   data.nu_bar, data.mu_bars)

    def to_dict(self) -> dict:
        return {
            "format": "kantoreg-model2d/1",
            "grid": self.grid.to_dict(),
            "p": self.p,
            "sign_config": list(self.sign_config),
            "step_params": [f.to_dict() for f in self.step_params],
            "intercept_grad": self.intercept_grad.tolist(),
            "nu_bar": None if self.nu_bar is None else self.nu_bar.values.tolist(),
            "mu_bars": [m.values.tolist() for m in self.mu_bars],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec2D":
        from .model import StepParams

        g = Grid2D.from_dict(d["grid"])
        sp = tuple(StepParams.from_dict(x) for x in d["step_params"])
        return cls(g, tuple(d["sign_config"]), sp,
                   np.array(d["intercept_grad"], dtype=float).reshape((len(sp),) + g.shape + (2,)),
                   None if d.get("nu_bar") is None else Density2D.normalized(g, d["nu_bar"]),
                   tuple(Density2D.normalized(g, m) for m in d.get("mu_bars", [])))


def model_displacements_2d(model: ModelSpec2D, phi, grad, support) -> np.ndarray:
    """Displacement fields ``x - T_i(x)`` for stacked potentials ``(p, n, nx, ny)``."""
    sc = _level_scales(model.step_params, phi[:, :, support])
    n = phi.shape[1]
    disp = np.zeros((n,) + model.grid.shape + (2,))
    for j in range(model.p):
        disp[:, support] += sc[j][..., None] * grad[j][:, support] - model.intercept_grad[j][support]
    return disp


def predict_2d(model: ModelSpec2D, dist_preds, solver_kw=None) -> Density2D:
    """Predicted response density for one record's predictor densities."""
    if model.nu_bar is None or len(model.mu_bars) != model.p:
        raise ValueError("model carries no reference densities")
    if len(dist_preds) != model.p:
        raise ValueError(f"expected {model.p} predictor densities")
    g = model.grid
    kw = dict(solver_kw or {})
    phi = np.zeros((model.p, 1) + g.shape)
    grad = np.zeros((model.p, 1) + g.shape + (2,))
    for j, (mb, d) in enumerate(zip(model.mu_bars, dist_preds)):
        pot = ot_solve_2d(mb, d, **kw).potential
        phi[j, 0], grad[j, 0] = pot.values, pot.grad
    sup = model.nu_bar.masses > SUPPORT_MASS
    disp = model_displacements_2d(model, phi, grad, sup)[0]
    return pushforward_2d(model.nu_bar, TransportField2D.identity(g).values - disp)


class Objective2D:
    """Loss ``(1/n) sum_i W2^2(nu_hat_i, nu_i)`` and its gradient in the knot weights.

    Inner transport problems are warm-started from the previous call.
    """

    def __init__(self, data: Dataset2D, sign_config, knots, solver_kw=None):
        from .model import StepParams

        self.data = data
        self.signs = tuple(sign_config)
        self.knots = [np.asarray(z, dtype=float) for z in knots]
        if len(self.signs) != data.p or len(self.knots) != data.p:
            raise ValueError("one sign and one knot vector per predictor")
        self._mk = StepParams
        self.kw = dict(solver_kw or {})
        self.sup = data.support
        self.w = data.weights[self.sup]
        self.phi_sup = data.phi[:, :, self.sup]
        self.grad_sup = data.grad[:, :, self.sup]
        self.sizes = [z.size for z in self.knots]
        self.offsets = np.concatenate([[0], np.cumsum(self.sizes)]).astype(int)
        self.warm = [None] * data.n
        self.inner_converged = True
        # bin index of each support cell per predictor: 1{s <= z_l} <=> l >= bin
        self.bins = [np.searchsorted(z, (1.0 if s == "+" else -1.0) * self.phi_sup[j], side="left")
                     for j, (z, s) in enumerate(zip(self.knots, self.signs))]

    @property
    def size(self) -> int:
        return int(self.offsets[-1])

    def step_params(self, beta):
        return [self._mk(z, beta[self.offsets[j]:self.offsets[j + 1]], s)
                for j, (z, s) in enumerate(zip(self.knots, self.signs))]

    def model(self, beta) -> ModelSpec2D:
        return ModelSpec2D.from_data(self.data, self.step_params(beta))

    def project(self, beta):
        out = np.array(beta, dtype=float)
        for j, s in enumerate(self.signs):
            sl = slice(self.offsets[j], self.offsets[j + 1])
            out[sl] = np.maximum(out[sl], 0.0) if s == "+" else np.minimum(out[sl], 0.0)
        return out

    def features(self) -> np.ndarray:
        """Centred displacement features ``(P, n, S, 2)`` of each knot weight."""
        n = self.data.n
        S = int(self.sup.sum())
        F = np.zeros((self.size, n, S, 2))
        for j in range(self.data.p):
            for l in range(self.sizes[j]):
                ind = (self.bins[j] <= l)[..., None] * self.grad_sup[j]
                F[self.offsets[j] + l] = ind - ind.mean(axis=0)
        return F

    def curvature(self) -> float:
        """Largest eigenvalue of the Gauss-Newton proxy Hessian of the loss."""
        F = self.features()
        A = (F * np.sqrt(self.w)[None, None, :, None]).reshape(self.size, -1)
        H = (A @ A.T) / self.data.n
        return float(np.linalg.eigvalsh(H)[-1]) if self.size else 0.0

    def displacements(self, beta) -> np.ndarray:
        m = self.model(beta)
        sup = self.sup
        sc = _level_scales(m.step_params, self.phi_sup)
        disp = np.zeros((self.data.n, int(sup.sum()), 2))
        for j in range(self.data.p):
            term = sc[j][..., None] * self.grad_sup[j]
            disp += term - term.mean(axis=0)
        return disp

    def loss_and_grad(self, beta, warm: bool = True):
        d = self.data
        g = d.grid
        X = TransportField2D.identity(g).values
        disp = self.displacements(beta)
        mapped = np.zeros((d.n, int(self.sup.sum()), 2))
        losses = np.zeros(d.n)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            for i in range(d.n):
                T = X.copy()
                T[self.sup] -= disp[i]
                nu_hat = pushforward_2d(d.nu_bar, T, warn=False)
                sol = ot_solve_2d(nu_hat, d.responses[i], init=self.warm[i] if warm else None,
                                  **self.kw)
                if warm:
                    self.warm[i] = sol.dual_iterate
                self.inner_converged &= sol.converged
                losses[i] = 2.0 * sol.dual_value
                mapped[i] = interpolate_field(g, sol.potential.grad, T[self.sup][:, 0],
                                              T[self.sup][:, 1])
        delta = mapped - mapped.mean(axis=0)
        grad = np.zeros(self.size)
        for j in range(d.p):
            inner = np.sum(delta * self.grad_sup[j], axis=-1) * self.w  # (n, S)
            per_bin = np.bincount(self.bins[j].ravel(), weights=inner.ravel(),
                                  minlength=self.sizes[j] + 1)[:self.sizes[j]]
            grad[self.offsets[j]:self.offsets[j + 1]] = -(2.0 / d.n) * np.cumsum(per_bin)
        return float(losses.mean()), grad

    def loss(self, beta, warm: bool = False) -> float:
        return self.loss_and_grad(beta, warm=warm)[0]


def fit_2d(data: Dataset2D, config=None, knots=None, solver_kw=None, noise_slack: float = 0.05):
    """Projected gradient descent on the knot weights, one run per sign configuration.

    Defaults differ from the 1D fit: 10 knots and at most 100 outer
    iterations, since every iteration solves ``n`` transport problems.
    """
    from .errors import StepSizeError
    from .fit import FitConfig, FitResult, all_sign_configs

    config = config or FitConfig(max_iters=100, n_knots=10, tol=1e-6)
    if data.n < 2:
        raise ValueError("fitting needs at least two records")
    configs = [tuple(c) for c in config.sign_configs] if config.sign_configs else \
        all_sign_configs(data.p)
    zk = list(knots) if knots is not None else \
        [_support_knots(data, j, config.n_knots) for j in range(data.p)]
    best = None
    per_delta, per_iter = {}, {}
    for delta in configs:
        obj = Objective2D(data, delta, zk, solver_kw)
        L = 2.0 * obj.curvature()
        step = config.step_size if config.step_size is not None else (0.9 / L if L > 0 else 1.0)
        beta = np.zeros(obj.size)
        loss, grad = obj.loss_and_grad(beta)
        trace = [loss]
        bad = 0
        it = 0
        for it in range(1, int(config.max_iters) + 1):
            nb = obj.project(beta - step * grad)
            nl, ng = obj.loss_and_grad(nb)
            # inner solves are approximate: an increase within the slack is
            # read as the noise floor and stops the run
            slack = noise_slack * abs(loss) + 1e-15
            if nl > loss + slack:
                bad += 1
                if bad >= config.divergence_patience:
                    raise StepSizeError(f"step size too large: loss increased for {bad} "
                                        "consecutive iterations")
                beta, loss, grad = nb, nl, ng
                trace.append(loss)
                continue
            bad = 0
            dec = loss - nl
            beta, loss, grad = nb, nl, ng
            trace.append(loss)
            if dec <= config.tol * max(abs(trace[-2]), 1e-300):
                break
        if not obj.inner_converged:
            warnings.warn("inner transport solves stopped before converging", stacklevel=2)
        key = "".join(delta)
        per_delta[key] = loss
        per_iter[key] = it
        pg = beta - obj.project(beta - grad)
        if best is None or loss < best[0] - 1e-12 * max(1.0, abs(best[0])):
            best = (loss, delta, obj, beta, np.array(trace), float(np.linalg.norm(pg)), it, step)
    loss, delta, obj, beta, trace, gnorm, it, step = best
    return FitResult(obj.model(beta), trace, tuple(delta), per_delta, gnorm, it, step, per_iter)
