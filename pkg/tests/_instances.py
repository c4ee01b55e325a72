"""Random small regression instances shared by the gradient and convexity checks."""
import warnings

import numpy as np

from kantoreg import Grid1D
from kantoreg.model import default_psi_knots, default_step_knots
from kantoreg.objective import QuadraticObjective
from kantoreg.synth import SynthConfig1D, gen_mixed_dataset

GRID = Grid1D(0.0, 1.0, 161)


def random_instance(rng: np.random.Generator):
    """Objective on a random dataset (n <= 8, p <= 2, q <= 1, K <= 12) and a
    random feasible parameter vector for a random sign configuration."""
    n = int(rng.integers(2, 9))
    p = int(rng.integers(1, 3))
    q = int(rng.integers(0, 2))
    data = None
    while data is None:
        cfg = SynthConfig1D(n, seed=int(rng.integers(2 ** 31)), grid=GRID, p=p, q=q)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            try:
                data = gen_mixed_dataset(cfg)
            except ValueError:
                # a few small draws give a non-monotone generating map; redraw
                continue
    signs = tuple(rng.choice(["+", "-"], size=p))
    zk = [default_step_knots(data.phi[j], int(rng.integers(2, 13))) for j in range(p)]
    pk = [default_psi_knots(GRID, int(rng.integers(2, 13))) for _ in range(q)]
    obj = QuadraticObjective(data, signs, zk, pk)
    beta = obj.project(rng.normal(0.0, 0.3, obj.size))
    return obj, beta


def central_difference(f, beta, i, step=1e-6):
    e = np.zeros_like(beta)
    e[i] = step
    return (f(beta + e) - f(beta - e)) / (2 * step)
