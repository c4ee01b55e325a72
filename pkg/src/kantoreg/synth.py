"""Seeded generators for the illustrative fixtures and the synthetic study."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .grid import Density1D, Grid1D, truncated_normal
from .model import Dataset, _sign_value
from .ot1d import TransportMap1D, barycenter, ot_map, potential_from_map, pushforward

DEFAULT_NOISE = 1.0 / (55.0 * math.pi)

# substream ids; appending a field never changes the others
_STREAMS = {"means1": 0, "means2": 1, "sigmas1": 2, "sigmas2": 3, "xi": 4, "X": 5}


def substream(seed: int, name: str) -> np.random.Generator:
    """Counter-based generator for one named field of a seeded experiment."""
    ss = np.random.SeedSequence(int(seed), spawn_key=(_STREAMS[name],))
    return np.random.Generator(np.random.Philox(ss))


@dataclass(frozen=True)
class SynthConfig1D:
    n: int
    seed: int = 0
    grid: Grid1D = field(default_factory=lambda: Grid1D(0.0, 1.0, 1001))
    noise_amp: float = DEFAULT_NOISE
    distortion_modes: int = 10
    p: int = 2
    q: int = 1

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("n must be at least 1")
        if self.noise_amp < 0:
            raise ValueError("noise_amp must be nonnegative")
        if self.p not in (0, 1, 2) or self.q not in (0, 1):
            raise ValueError("the generator supports p <= 2 and q <= 1")


def _f1_prime(t):
    return 0.5 * np.sqrt(np.clip(1.0 - np.asarray(t, dtype=float), 0.0, None))


def _f2_prime(t):
    return 0.5 * np.log(1.2 - np.asarray(t, dtype=float))


def _psi_prime(x):
    return 0.3 * (1.0 - np.cos(2 * np.pi * np.asarray(x, dtype=float))) / (2 * np.pi)


@dataclass(frozen=True)
class TruthParams:
    """Closed-form link derivatives (one per predictor) and covariate terms."""

    f_derivs: tuple
    psi_derivs: tuple = ()
    signs: tuple | None = None

    def __post_init__(self):
        if self.signs is None:
            object.__setattr__(self, "signs", tuple("+" for _ in self.f_derivs))
        object.__setattr__(self, "f_derivs", tuple(self.f_derivs))
        object.__setattr__(self, "psi_derivs", tuple(self.psi_derivs))

    @classmethod
    def default(cls) -> "TruthParams":
        """``f1'(t) = 0.5 sqrt(1 - t)``, ``f2'(t) = 0.5 log(1.2 - t)`` and
        ``psi'(x) = 0.3 (1 - cos 2 pi x) / (2 pi)``."""
        return cls((_f1_prime, _f2_prime), (_psi_prime,))

    @classmethod
    def zero(cls, p: int = 2, q: int = 1) -> "TruthParams":
        zero = lambda t: np.zeros(np.shape(t))
        return cls(tuple(zero for _ in range(p)), tuple(zero for _ in range(q)))

    @property
    def f1_deriv(self) -> Callable:
        return self.f_derivs[0]

    @property
    def f2_deriv(self) -> Callable:
        return self.f_derivs[1]

    @property
    def psi_deriv(self) -> Callable:
        return self.psi_derivs[0]


def psi_truth(x):
    """Closed form of the default covariate potential."""
    x = np.asarray(x, dtype=float)
    return 0.3 * (x / (2 * np.pi) - np.sin(2 * np.pi * x) / (4 * np.pi ** 2))


def distortion_values(x, xi) -> np.ndarray:
    """``x + sum_k xi_k sin(k pi x)`` (x scaled to the unit interval by the caller)."""
    k = np.arange(1, len(xi) + 1)
    return x + np.sin(np.pi * np.multiply.outer(x, k)) @ np.asarray(xi, dtype=float)


def gen_distortion(rng: np.random.Generator, grid: Grid1D, amp: float = DEFAULT_NOISE,
                   modes: int = 10, max_redraws: int = 1000):
    """Random monotone sine perturbation of the identity on ``grid``.

    Returns
    -------
    tmap : TransportMap1D
    xi : ndarray of accepted coefficients
    redraws : int
        Number of rejected (non-monotone) draws.
    """
    u = (grid.nodes - grid.lo) / (grid.hi - grid.lo)
    for redraws in range(max_redraws + 1):
        xi = rng.uniform(-amp, amp, size=modes) if amp > 0 else np.zeros(modes)
        t = grid.lo + (grid.hi - grid.lo) * distortion_values(u, xi)
        tm = TransportMap1D(grid, t)
        if tm.is_monotone(tol=0.0):
            return tm, xi, redraws
    raise RuntimeError("could not draw a monotone distortion")


def _draw_predictors(cfg: SynthConfig1D):
    n = cfg.n
    ranges = [((0.2, 0.5), (0.2, 0.3)), ((0.5, 0.8), (0.3, 0.4))]
    out = []
    for j in range(cfg.p):
        (m0, m1), (s0, s1) = ranges[j]
        m = substream(cfg.seed, f"means{j + 1}").uniform(m0, m1, size=n)
        s = substream(cfg.seed, f"sigmas{j + 1}").uniform(s0, s1, size=n)
        out.append((m, s))
    return out


def gen_mixed_dataset(cfg: SynthConfig1D, truth: TruthParams | None = None,
                      nu_bar: Density1D | None = None) -> Dataset:
    """Responses generated through the model plus a random monotone distortion.

    Predictors are truncated normals; their potentials (relative to the
    predictor barycenters) are centred against the reference ``nu_bar``
    (uniform by default). Each response is the reference pushed through the
    model map followed by an independent sine distortion. The returned
    dataset is built from the generated densities alone, exactly as a user
    would, with potentials centred against the response barycenter.
    Generation details go into ``dataset.meta``.
    """
    truth = TruthParams.default() if truth is None else truth
    if len(truth.f_derivs) < cfg.p or len(truth.psi_derivs) < cfg.q:
        raise ValueError("truth has fewer components than the configuration")
    g = cfg.grid
    x = g.nodes
    n = cfg.n
    ref = Density1D.uniform(g) if nu_bar is None else nu_bar
    preds = [[truncated_normal(g, m[i], s[i]) for i in range(n)] for m, s in _draw_predictors(cfg)]
    mbars = [barycenter(col) for col in preds]

    disp = np.zeros((n, g.n))
    for j in range(cfg.p):
        sgn = _sign_value(truth.signs[j])
        F = np.empty((n, g.n))
        for i in range(n):
            pot = potential_from_map(ot_map(mbars[j], preds[j][i]), ref)
            F[i] = truth.f_derivs[j](sgn * pot.values) * pot.deriv
        disp += F - F.mean(axis=0)
    X = substream(cfg.seed, "X").uniform(0.0, 1.0, size=(n, cfg.q))
    Z = X - X.mean(axis=0)
    for k in range(cfg.q):
        disp += Z[:, k, None] * truth.psi_derivs[k](x)[None, :]

    xi_rng = substream(cfg.seed, "xi")
    responses, xis, redraws = [], [], 0
    u = (x - g.lo) / (g.hi - g.lo)
    for i in range(n):
        model_map = x - disp[i]
        tm = TransportMap1D(g, model_map)
        bad = tm.first_decrease()
        if bad is not None:
            raise ValueError(f"generating map for record {i} is not monotone at node {bad}")
        _, xi, r = gen_distortion(xi_rng, g, cfg.noise_amp, cfg.distortion_modes)
        redraws += r
        xis.append(xi)
        mu = (np.clip(model_map, g.lo, g.hi) - g.lo) / (g.hi - g.lo)
        total = g.lo + (g.hi - g.lo) * distortion_values(mu, xi)
        responses.append(pushforward(ref, TransportMap1D(g, total)))

    rows = [[preds[j][i] for j in range(cfg.p)] for i in range(n)]
    meta = {"seed": cfg.seed, "redraws": redraws, "xi": np.array(xis), "X": X,
            "true_displacements": disp, "reference": ref}
    return Dataset.build(responses, rows, X, centering="response", mu_bars=mbars, meta=meta)


# ---------------------------------------------------------------------------
# illustrative one-dimensional fixture
# ---------------------------------------------------------------------------

def demo_maps_1d(x):
    """The three maps of the 1D fixture; they average to the identity."""
    x = np.asarray(x, dtype=float)
    t1 = (1.0 - np.exp(-x)) / (1.0 - np.exp(-1.0))
    t2 = (np.exp(x) - 1.0) / (np.e - 1.0)
    return t1, t2, 3.0 * x - t1 - t2


def gen_demo_1d(n_nodes: int = 2001):
    """Truncated N(0.5, 0.1^2) reference, its three pushforwards and their potentials.

    Potentials are integrated from the closed-form maps (which are optimal
    by construction) and centred against the reference.
    """
    g = Grid1D(0.0, 1.0, n_nodes)
    mbar = truncated_normal(g, 0.5, 0.1)
    pots, mus = [], []
    for t in demo_maps_1d(g.nodes):
        tm = TransportMap1D(g, t)
        pots.append(potential_from_map(tm, mbar, "mu_bar"))
        mus.append(pushforward(mbar, tm))
    return mbar, mus, pots


def demo_dataset_1d(n_nodes: int = 2001, link=None) -> Dataset:
    """Dataset for the 1D fixture with responses ``(id - Phi_i')#mu_bar``.

    ``link`` is a StepParams (or None for the identity link, i.e. the
    responses equal the predictors).
    """
    from .model import compose_values

    mbar, mus, pots = gen_demo_1d(n_nodes)
    g = mbar.grid
    phi = np.array([p.values for p in pots])
    dphi = np.array([p.deriv for p in pots])
    if link is None:
        disp = dphi - dphi.mean(axis=0)
    else:
        _, scale = compose_values(link, phi)
        F = scale * dphi
        disp = F - F.mean(axis=0)
    responses = [pushforward(mbar, TransportMap1D(g, g.nodes - d)) for d in disp]
    rmaps = g.nodes - disp
    return Dataset.from_potentials(g, responses, mbar, phi[None], dphi[None],
                                   response_maps=rmaps, mu_bars=(mbar,),
                                   dist_predictors=[[m] for m in mus])


# ---------------------------------------------------------------------------
# convergence experiment
# ---------------------------------------------------------------------------

def fprime_l2_error(model, data: Dataset, j: int, truth_deriv: Callable,
                    weight: str = "pushforward") -> float:
    """L2 distance between fitted and true link derivatives of predictor ``j``.

    ``pushforward`` weights by the average distribution of the signed
    potentials under the reference measure (the measure the loss sees);
    ``uniform`` uses Lebesgue measure over the observed potential range.
    """
    f = model.step_params[j]
    s = _sign_value(f.sign) * data.phi[j]
    if weight == "pushforward":
        diff = f.fprime(s) - truth_deriv(s)
        return float(np.sqrt(np.mean((diff * diff) @ data.weights)))
    if weight != "uniform":
        raise ValueError("weight must be 'pushforward' or 'uniform'")
    sup = data.support
    t = np.linspace(s[:, sup].min(), s[:, sup].max(), 4001)
    diff = f.fprime(t) - truth_deriv(t)
    return float(np.sqrt(np.trapezoid(diff * diff, t) / (t[-1] - t[0])))


def psi_l2_error(model, data: Dataset, k: int, truth_deriv: Callable,
                 weight: str = "pushforward") -> float:
    x = data.grid.nodes
    diff = model.psi_params[k].psi_prime(x) - truth_deriv(x)
    if weight == "pushforward":
        return float(np.sqrt(data.nu_bar.expect(diff * diff)))
    if weight != "uniform":
        raise ValueError("weight must be 'pushforward' or 'uniform'")
    return float(np.sqrt(data.grid.integrate(diff * diff) / (data.grid.hi - data.grid.lo)))


def recovery_errors(result, data: Dataset, truth: TruthParams, weight: str = "pushforward"):
    """Dict of L2 errors keyed ``f1, f2, ..., psi1, ...``."""
    out = {}
    for j in range(data.p):
        out[f"f{j + 1}"] = fprime_l2_error(result.model, data, j, truth.f_derivs[j], weight)
    for k in range(data.q):
        out[f"psi{k + 1}"] = psi_l2_error(result.model, data, k, truth.psi_derivs[k], weight)
    return out


def run_convergence(ns: Sequence[int], seeds, out=None, *, config=None,
                    grid: Grid1D | None = None, truth: TruthParams | None = None,
                    weight: str = "pushforward"):
    """Fit the synthetic model for every ``n`` and seed and tabulate log errors.

    Parameters
    ----------
    ns : sequence of int
    seeds : int or sequence of int
        An int ``s`` means seeds ``0, ..., s - 1``.
    out : path, optional
        Where to write ``convergence.csv`` (columns ``target,log_n,log_l2_error``).

    Returns
    -------
    rows : list of (target, log_n, log_l2_error)
        Log errors averaged over seeds.
    per_seed : dict mapping (n, seed) to the error dict
    """
    from .fit import FitConfig, fit

    ns = [int(n) for n in ns]
    if not ns:
        raise ValueError("ns must be nonempty")
    seeds = list(range(seeds)) if isinstance(seeds, (int, np.integer)) else [int(s) for s in seeds]
    truth = TruthParams.default() if truth is None else truth
    config = FitConfig() if config is None else config
    grid = Grid1D(0.0, 1.0, 1001) if grid is None else grid
    per_seed = {}
    rows = []
    for n in ns:
        logs = {}
        for s in seeds:
            data = gen_mixed_dataset(SynthConfig1D(n, seed=s, grid=grid), truth)
            errs = recovery_errors(fit(data, config), data, truth, weight)
            per_seed[(n, s)] = errs
            for key, e in errs.items():
                logs.setdefault(key, []).append(np.log(e))
        for key, vals in logs.items():
            rows.append((key, float(np.log(n)), float(np.mean(vals))))
    if out is not None:
        from .io import write_rows

        write_rows(out, ["target", "log_n", "log_l2_error"], rows)
    return rows, per_seed


# ---------------------------------------------------------------------------
# illustrative link settings and 2D disk fixture
# ---------------------------------------------------------------------------

DEMO_KNOTS = np.linspace(-0.05, 0.05, 100)


def demo_links(sign: str = "+"):
    """The three links of the illustration: slopes 0.505, a sigmoid-smoothed
    step with the same weights, and slope 1.2625."""
    from .model import StepParams

    s = _sign_value(sign)
    l = np.arange(1, 101)
    return [StepParams(DEMO_KNOTS, s * 2e-4 * l, sign, 0.0),
            StepParams(DEMO_KNOTS, s * 2e-4 * l, sign, 100.0),
            StepParams(DEMO_KNOTS, s * 5e-4 * l, sign, 0.0)]


def gen_demo_2d(n: int = 64, diameter: float = 0.1):
    """Disks at (0.2, 0.2) and (0.8, 0.8) and their fixed-point barycenter."""
    import warnings

    from .ot2d import Grid2D, barycenter_2d, disk_density

    if n < 32:
        raise ValueError("the disk fixture needs at least a 32x32 grid")
    g = Grid2D.unit(n)
    d1 = disk_density(g, (0.2, 0.2), diameter)
    d2 = disk_density(g, (0.8, 0.8), diameter)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        bary = barycenter_2d([d1, d2])
    return d1, d2, bary


def demo_dataset_2d(n: int = 32, link=None, fixture=None):
    """Noiseless 2D dataset: responses ``(id - grad varphi_i)#mu_bar`` with
    ``varphi_i = f (.) phi_i`` centred over the two records.

    ``link`` defaults to the uniform slope 0.505.
    """
    import warnings

    from .ot2d import (Dataset2D, ModelSpec2D, TransportField2D, model_displacements_2d,
                       ot_solve_2d, pushforward_2d)

    d1, d2, bary = fixture if fixture is not None else gen_demo_2d(n)
    g = bary.grid
    link = link if link is not None else demo_links("+")[0]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        pots = [ot_solve_2d(bary, d).potential for d in (d1, d2)]
    phi = np.array([[p.values for p in pots]])
    grad = np.array([[p.grad for p in pots]])
    base = Dataset2D(g, (d1, d2), bary, phi, grad, (bary,))
    truth = ModelSpec2D.from_data(base, [link])
    disp = model_displacements_2d(truth, phi, grad, base.support)
    X = TransportField2D.identity(g).values
    responses = tuple(pushforward_2d(bary, X - d, warn=False) for d in disp)
    return Dataset2D(g, responses, bary, phi, grad, (bary,),
                     {"truth": truth, "predictors": (d1, d2), "displacements": disp})
