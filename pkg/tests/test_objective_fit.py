import numpy as np
import pytest
from hypothesis import given, strategies as st

from _instances import central_difference, random_instance
from kantoreg import Grid1D
from kantoreg.errors import StepSizeError
from kantoreg.fit import FitConfig, all_sign_configs, fit, project, project_vartheta
from kantoreg.model import ModelSpec, PsiParams, StepParams, default_psi_knots
from kantoreg.objective import QuadraticObjective, empirical_loss, grad_theta, grad_vartheta
from kantoreg.synth import (SynthConfig1D, TruthParams, demo_dataset_1d, demo_links,
                            gen_mixed_dataset, psi_truth)


@given(st.integers(0, 2 ** 32 - 1))
def test_gradient_matches_finite_differences(seed):
    obj, beta = random_instance(np.random.default_rng(seed))
    g = obj.grad(beta)
    for i in range(obj.size):
        fd = central_difference(obj.loss, beta, i)
        assert abs(g[i] - fd) <= max(1e-4 * abs(fd), 1e-8)


@given(st.integers(0, 2 ** 32 - 1))
def test_loss_is_convex(seed):
    rng = np.random.default_rng(seed)
    obj, u = random_instance(rng)
    v = rng.normal(0.0, 1.0, obj.size)
    mid = obj.loss(0.5 * (u + v))
    assert 0.5 * (obj.loss(u) + obj.loss(v)) - mid >= -1e-10


@given(st.integers(0, 2 ** 32 - 1))
def test_quadratic_form_matches_loss(seed):
    rng = np.random.default_rng(seed)
    obj, beta = random_instance(rng)
    H, g, c = obj.quadratic_form()
    assert abs(beta @ H @ beta + g @ beta + c - obj.loss(beta)) <= 1e-9 * max(1.0, obj.loss(beta))


def test_grad_theta_direct_quadrature():
    data = demo_dataset_1d(801, link=demo_links("+")[2])
    knots = np.linspace(-0.05, 0.05, 6)
    model = ModelSpec.from_data(data, [StepParams(knots, np.zeros(6))])
    x, w, n = data.grid.nodes, data.weights, data.n
    phi, dphi = data.phi[0], data.dphi[0]
    want = np.zeros(6)
    for l, z in enumerate(knots):
        ind = dphi * (phi <= z)
        centred = ind - ind.mean(axis=0)
        for i in range(n):
            want[l] += -2.0 / n * np.sum((x - data.response_maps[i]) * centred[i] * w)
    assert np.allclose(grad_theta(model, data, 0), want, rtol=1e-10, atol=1e-14)


def test_grad_vartheta_zero_covariates():
    g = Grid1D(0.0, 1.0, 201)
    data = gen_mixed_dataset(SynthConfig1D(6, seed=2, grid=g, p=1, q=1))
    zeroed = type(data).from_potentials(g, data.responses, data.nu_bar, data.phi, data.dphi,
                                        np.full((6, 1), 0.4), response_maps=data.response_maps)
    kn = default_psi_knots(g, 10)
    model = ModelSpec.from_data(zeroed, [StepParams(np.linspace(-1, 1, 5), np.zeros(5))],
                                [PsiParams(kn, np.full(10, 0.05))])
    # centred covariates are zero up to rounding of the mean
    assert np.max(np.abs(grad_vartheta(model, zeroed, 0))) < 1e-15


def test_grad_vartheta_stationary_at_truth():
    g = Grid1D(0.0, 1.0, 1001)
    data = gen_mixed_dataset(SynthConfig1D(40, seed=5, grid=g, noise_amp=0.0, p=0, q=1))
    kn = default_psi_knots(g, 100)
    # vartheta_l are the jumps of x - psi'(x) at the knots
    h_prime = lambda t: t - TruthParams.default().psi_deriv(t)
    jumps = np.diff(np.r_[0.0, h_prime(kn)])
    model = ModelSpec.from_data(data, [], [PsiParams(kn, jumps)])
    assert np.max(np.abs(grad_vartheta(model, data, 0))) <= 5e-3
    assert abs(psi_truth(0.0)) == 0.0


def test_project_examples():
    assert np.array_equal(project(np.array([-1.0, 2.0]), "+"), [0.0, 2.0])
    assert np.array_equal(project(np.array([-1.0, 2.0]), "-"), [-1.0, 0.0])
    assert np.array_equal(project_vartheta([-0.5, 0.3]), [0.0, 0.3])
    assert np.allclose(project_vartheta([0.5, 1.5], rho_box=1.0).sum(), 1.0)


@given(st.lists(st.floats(-5, 5), min_size=1, max_size=10), st.sampled_from("+-"),
       st.lists(st.floats(-5, 5), min_size=1, max_size=6))
def test_project_idempotent(theta, sign, vartheta):
    th, vs = project([np.array(theta)], [sign], [np.array(vartheta)], rho_box=2.0)
    th2, vs2 = project(th, [sign], vs, rho_box=2.0)
    assert np.array_equal(th[0], th2[0]) and np.array_equal(vs[0], vs2[0])


def test_sign_enumeration():
    assert all_sign_configs(2) == [("+", "+"), ("+", "-"), ("-", "+"), ("-", "-")]
    with pytest.raises(ValueError):
        all_sign_configs(17)


def test_fit_recovers_negative_sign():
    knots = np.linspace(-0.06, 0.06, 20)
    data = demo_dataset_1d(1001, link=StepParams(knots, np.r_[np.zeros(19), -0.5], "-"))
    # three records identify only a coarse link, so fit the four-knot class
    res = fit(data, FitConfig(n_knots=4))
    assert res.chosen_delta == ("-",)
    f = res.model.step_params[0]
    vals = f.fprime(-data.phi[0][:, data.support])
    assert np.max(np.abs(vals + 0.5)) <= 5e-2
    assert res.per_delta_losses["-"] == min(res.per_delta_losses.values())


def test_fit_zero_signal():
    g = Grid1D(0.0, 1.0, 201)
    data = gen_mixed_dataset(SynthConfig1D(8, seed=1, grid=g, noise_amp=0.0, q=0),
                             TruthParams.zero())
    res = fit(data, FitConfig(n_knots=10))
    assert np.max(np.abs(res.model.parameter_vector())) < 1e-8
    assert empirical_loss(res.model, data) < 1e-12


def test_fit_zero_signal_covariate():
    # psi' = 0 means vartheta equal to the knot spacing, not vartheta = 0
    g = Grid1D(0.0, 1.0, 201)
    data = gen_mixed_dataset(SynthConfig1D(8, seed=1, grid=g, noise_amp=0.0, p=0),
                             TruthParams.zero())
    res = fit(data, FitConfig(n_psi_knots=20))
    s = res.model.psi_params[0]
    assert np.max(np.abs(s.psi_prime(g.nodes))) <= np.diff(s.knots).max() + 1e-9


def test_fit_trace_nonincreasing(small_mixed):
    res = fit(small_mixed, FitConfig(max_iters=400, n_knots=12, n_psi_knots=12))
    tr = res.loss_trace
    assert np.all(np.diff(tr) <= 1e-12 * np.maximum(1.0, np.abs(tr[:-1])))
    assert res.per_delta_losses["".join(res.chosen_delta)] == min(res.per_delta_losses.values())
    for f, s in zip(res.model.step_params, res.chosen_delta):
        assert f.sign == s


def test_fit_divergence_raises(small_mixed):
    with pytest.raises(StepSizeError, match="step size too large"):
        fit(small_mixed, FitConfig(step_size=1e3, max_iters=200, n_knots=6, n_psi_knots=6))


def test_fit_sign_selection_matches_generator():
    g = Grid1D(0.0, 1.0, 401)
    data = gen_mixed_dataset(SynthConfig1D(50, seed=7, grid=g, noise_amp=0.0))
    res = fit(data, FitConfig(max_iters=1500, n_knots=20, n_psi_knots=20))
    assert res.chosen_delta == ("+", "+")


def test_fit_rejects_tiny_or_empty():
    data = demo_dataset_1d(201)
    one = type(data).from_potentials(data.grid, data.responses[:1], data.nu_bar,
                                     data.phi[:, :1], data.dphi[:, :1])
    with pytest.raises(ValueError):
        fit(one)


def test_fit_config_roundtrip():
    cfg = FitConfig(max_iters=10, sign_configs=[("+", "-")])
    assert FitConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ValueError):
        FitConfig(step_size=-1.0)
