import numpy as np
import pytest

from kantoreg import Grid1D, TransportMap1D
from kantoreg.objective import displacements_from_callables, quadratic_loss_of_displacements
from kantoreg.synth import (SynthConfig1D, TruthParams, demo_maps_1d, distortion_values,
                            gen_distortion, gen_mixed_dataset, run_convergence, substream)

G = Grid1D(0.0, 1.0, 401)


def test_distortion_zero_is_identity():
    tm, xi, redraws = gen_distortion(np.random.default_rng(0), G, amp=0.0)
    assert np.array_equal(tm.values, G.nodes) and redraws == 0


def test_distortion_single_mode():
    xi = np.zeros(10)
    xi[0] = 1 / (55 * np.pi)
    t = distortion_values(G.nodes, xi)
    assert np.allclose(t, G.nodes + np.sin(np.pi * G.nodes) / (55 * np.pi))
    assert TransportMap1D(G, t).is_monotone(tol=0.0)


def test_distortion_mean_is_identity():
    rng = np.random.default_rng(8)
    vals = np.array([gen_distortion(rng, G)[0].values[200] for _ in range(10_000)])
    assert abs(vals.mean() - 0.5) <= 3 * vals.std() / np.sqrt(vals.size)


def test_distortions_monotone():
    rng = np.random.default_rng(1)
    for _ in range(200):
        tm, _, _ = gen_distortion(rng, G)
        assert tm.is_monotone(tol=0.0)


def test_substreams_independent():
    a = substream(3, "xi").uniform(size=5)
    b = substream(3, "means1").uniform(size=5)
    assert not np.allclose(a, b)
    assert np.array_equal(a, substream(3, "xi").uniform(size=5))


def test_noiseless_zero_truth_gives_reference():
    data = gen_mixed_dataset(SynthConfig1D(5, seed=0, grid=G, noise_amp=0.0), TruthParams.zero())
    ref = data.meta["reference"]
    for r in data.responses:
        assert np.max(np.abs(r.values - ref.values)) < 1e-9


def test_generator_deterministic():
    a = gen_mixed_dataset(SynthConfig1D(6, seed=42, grid=G))
    b = gen_mixed_dataset(SynthConfig1D(6, seed=42, grid=G))
    for ra, rb in zip(a.responses, b.responses):
        assert np.array_equal(ra.values, rb.values)
    assert np.array_equal(a.scalars, b.scalars)


def test_responses_unit_mass():
    data = gen_mixed_dataset(SynthConfig1D(10, seed=2, grid=G))
    for r in data.responses:
        assert abs(G.integrate(r.values) - 1.0) < 1e-9 and np.all(r.values >= 0)


def test_truth_loss_at_discretisation_floor():
    g = Grid1D(0.0, 1.0, 1001)
    data = gen_mixed_dataset(SynthConfig1D(30, seed=4, grid=g, noise_amp=0.0))
    truth = TruthParams.default()
    disp = displacements_from_callables(data, truth.f_derivs, truth.signs, truth.psi_derivs)
    assert quadratic_loss_of_displacements(data, disp) <= 1e-5


def test_demo_maps_endpoints_and_average():
    x = np.linspace(0, 1, 2001)
    t1, t2, t3 = demo_maps_1d(x)
    assert t1[0] == 0 and abs(t1[-1] - 1) < 1e-15
    assert np.allclose(t1 + t2 + t3, 3 * x, atol=1e-15)


def test_convergence_rows_repeatable(tmp_path):
    from kantoreg.fit import FitConfig

    cfg = FitConfig(max_iters=50, n_knots=8, n_psi_knots=8)
    g = Grid1D(0.0, 1.0, 201)
    a, _ = run_convergence([20, 20], [0], tmp_path / "c.csv", config=cfg, grid=g)
    assert a[:3] == a[3:]
    text = (tmp_path / "c.csv").read_text().splitlines()
    assert text[0] == "target,log_n,log_l2_error" and len(text) == 7


def test_config_validation():
    with pytest.raises(ValueError):
        SynthConfig1D(0)
    with pytest.raises(ValueError):
        SynthConfig1D(5, p=3)
