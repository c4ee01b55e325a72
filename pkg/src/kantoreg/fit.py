"""Projected gradient descent over every sign configuration."""
from __future__ import annotations

import itertools
import math
import warnings
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .errors import StepSizeError
from .model import (Dataset, FeasibilityConstants, ModelSpec, PsiParams, StepParams,
                    default_psi_knots, default_step_knots, degenerate_predictors,
                    estimate_constants, step_derivative_stats)
from .objective import QuadraticObjective, _cap_sum

MAX_SIGN_PREDICTORS = 16


@dataclass
class FitConfig:
    """Optimizer settings.

    Attributes
    ----------
    step_size : float or None
        Fixed step; ``None`` uses ``0.9 / L`` with ``L`` the largest
        eigenvalue of the loss Hessian.
    max_iters : int
    tol : float
        Stop once the relative loss decrease of one step falls below this.
    sign_configs : list of sign tuples, optional
        Restrict the search; default is every configuration in ``{+,-}^p``.
    project_rho_box : float or list of float, optional
        Cap on ``sum(vartheta_k)`` applied after the nonnegativity clamp.
    n_knots, n_psi_knots : int
        Knot counts for the link derivatives and the covariate terms.
    """

    step_size: float | None = None
    max_iters: int = 5000
    tol: float = 1e-12
    sign_configs: list | None = None
    project_rho_box: float | list | None = None
    n_knots: int = 100
    n_psi_knots: int = 100
    divergence_patience: int = 10

    def __post_init__(self):
        if self.step_size is not None and not self.step_size > 0:
            raise ValueError("step_size must be positive")
        if int(self.max_iters) < 1:
            raise ValueError("max_iters must be at least 1")
        if not self.tol > 0:
            raise ValueError("tol must be positive")
        if self.n_knots < 1 or self.n_psi_knots < 1:
            raise ValueError("knot counts must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        if d["sign_configs"] is not None:
            d["sign_configs"] = ["".join(s) for s in d["sign_configs"]]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "FitConfig":
        d = dict(d)
        if d.get("sign_configs") is not None:
            d["sign_configs"] = [tuple(s) for s in d["sign_configs"]]
        known = {k: d[k] for k in cls.__dataclass_fields__ if k in d}
        return cls(**known)


@dataclass
class FitResult:
    model: ModelSpec
    loss_trace: np.ndarray
    chosen_delta: tuple
    per_delta_losses: dict
    grad_norm_final: float
    iterations: int = 0
    step_size: float = 0.0
    per_delta_iterations: dict = field(default_factory=dict)


def project(params, delta: Sequence[str], vartheta=None, rho_box=None):
    """Clamp knot weights onto the sign cone of ``delta``.

    ``params`` is a list of per-predictor arrays (or a single array when
    ``delta`` has one entry). ``vartheta`` arrays, if given, are clamped to be
    nonnegative and then capped at ``rho_box`` in total.
    """
    single = isinstance(params, np.ndarray) or (params and np.isscalar(params[0]))
    arrs = [np.asarray(params, dtype=float)] if single else [np.asarray(t, dtype=float) for t in params]
    if len(arrs) != len(delta):
        raise ValueError("one sign per parameter block expected")
    th = [np.maximum(t, 0.0) if s == "+" else np.minimum(t, 0.0) for t, s in zip(arrs, delta)]
    th = th[0] if single else th
    if vartheta is None:
        return th
    vs = [np.maximum(np.asarray(v, dtype=float), 0.0) for v in vartheta]
    if rho_box is not None:
        vs = [_cap_sum(v, c) for v, c in zip(vs, np.broadcast_to(rho_box, (len(vs),)))]
    return th, vs


def project_vartheta(vartheta, rho_box=None):
    v = np.maximum(np.asarray(vartheta, dtype=float), 0.0)
    return v if rho_box is None else _cap_sum(v, rho_box)


def all_sign_configs(p: int) -> list:
    if p > MAX_SIGN_PREDICTORS:
        raise ValueError(f"sign enumeration over 2^{p} configurations refused (p > "
                         f"{MAX_SIGN_PREDICTORS}); pass sign_configs explicitly")
    return [tuple(c) for c in itertools.product("+-", repeat=p)]


def _pgd(obj: QuadraticObjective, config: FitConfig, frozen: np.ndarray):
    H, g, c = obj.quadratic_form()
    P = obj.size
    lmax = float(np.linalg.eigvalsh(H)[-1]) if P else 0.0
    L = 2.0 * lmax
    step = config.step_size if config.step_size is not None else (0.9 / L if L > 0 else 1.0)
    beta = np.zeros(P)
    loss = float(c)
    trace = [loss]
    bad = 0
    it = 0
    for it in range(1, int(config.max_iters) + 1):
        grad = g + 2.0 * (H @ beta)
        nb = obj.project(beta - step * grad, config.project_rho_box)
        nb[frozen] = 0.0
        nl = float(c + g @ nb + nb @ H @ nb)
        slack = 1e-12 * max(1.0, abs(loss))
        if nl > loss + slack:
            bad += 1
            if bad >= config.divergence_patience:
                raise StepSizeError("step size too large: loss increased for "
                                    f"{bad} consecutive iterations")
        else:
            bad = 0
        dec = loss - nl
        beta, loss = nb, nl
        trace.append(loss)
        if 0 <= dec <= config.tol * max(abs(trace[-2]), 1e-300):
            break
    grad = g + 2.0 * (H @ beta)
    pg = beta - obj.project(beta - grad, config.project_rho_box)
    pg[frozen] = 0.0
    return beta, np.array(trace), float(np.linalg.norm(pg)), it, step


def fit(data: Dataset, config: FitConfig | None = None, step_knots=None,
        psi_knots=None) -> FitResult:
    """Fit link derivatives and covariate terms by projected gradient descent.

    Each sign configuration is fitted from zero; the one with the smallest
    final loss wins (ties go to the lexicographically first, ``+`` before
    ``-``).
    """
    config = config or FitConfig()
    if data.n < 2:
        raise ValueError("fitting needs at least two records")
    p, q = data.p, data.q
    if p + q < 1:
        raise ValueError("no predictors to fit")
    configs = [tuple(c) for c in config.sign_configs] if config.sign_configs else all_sign_configs(p)
    for c in configs:
        if len(c) != p or any(s not in "+-" for s in c):
            raise ValueError(f"bad sign configuration {c!r}")
    zk = list(step_knots) if step_knots is not None else \
        [default_step_knots(data.phi[j], config.n_knots) for j in range(p)]
    pk = list(psi_knots) if psi_knots is not None else \
        [default_psi_knots(data.grid, config.n_psi_knots) for _ in range(q)]
    degenerate = degenerate_predictors(data)
    if degenerate:
        warnings.warn(f"degenerate predictors {degenerate}: link weights kept at zero",
                      stacklevel=2)
    constants = estimate_constants(data)

    best = None
    per_delta, per_iter = {}, {}
    for delta in configs:
        obj = QuadraticObjective(data, delta, zk, pk)
        frozen = np.zeros(obj.size, dtype=bool)
        for j in degenerate:
            frozen[obj.offsets[j]:obj.offsets[j + 1]] = True
        beta, trace, gnorm, iters, step = _pgd(obj, config, frozen)
        final = obj.loss(beta)
        key = "".join(delta)
        per_delta[key] = final
        per_iter[key] = iters
        if best is None or final < best[0] - 1e-12 * max(1.0, abs(best[0])):
            best = (final, delta, obj, beta, trace, gnorm, iters, step)

    final, delta, obj, beta, trace, gnorm, iters, step = best
    thetas, varthetas = obj.split(beta)
    sp = [StepParams(z, t, s) for z, t, s in zip(zk, thetas, delta)]
    pp = [PsiParams(z, v) for z, v in zip(pk, varthetas)]
    model = ModelSpec.from_data(data, sp, pp, constants.with_bounds(*parameter_bounds(sp, pp, data.grid)))
    return FitResult(model, trace, tuple(delta), per_delta, gnorm, iters, step, per_iter)


def parameter_bounds(step_params, psi_params, grid=None):
    """Class bounds ``(kappa1, kappa2, rho)`` realised by fitted parameters.

    ``kappa2`` uses the steepest slope of the piecewise-linear interpolant
    through the knots, since the step form itself has unbounded curvature.
    ``rho`` is the steepest slope of ``psi'`` between adjacent grid nodes when
    ``grid`` is given (each jump then falls inside one cell, which is what a
    map evaluated on that grid sees); otherwise the knot interpolant is used.
    """
    k1, k2 = [], []
    for f in step_params:
        a, b = step_derivative_stats(f, discrete=True)
        k1.append(a)
        k2.append(b)
    rho = []
    for s in psi_params:
        if grid is not None:
            rho.append(float(np.max(np.abs(np.diff(s.psi_prime(grid.nodes)) / grid.h))))
            continue
        dz = np.diff(s.knots)
        slopes = 1.0 - s.vartheta[1:] / dz if dz.size else np.zeros(0)
        rho.append(float(max(1.0, np.max(np.abs(slopes)))) if slopes.size else 1.0)
    return np.array(k1), np.array(k2), np.array(rho)
