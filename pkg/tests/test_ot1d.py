import numpy as np
import pytest
from hypothesis import given, strategies as st

from kantoreg import (Density1D, Grid1D, TransportMap1D, barycenter, ot_map, potential_from_map,
                      pushforward, truncated_normal, w2)
from kantoreg.errors import DomainError, NonMonotoneMapError
from kantoreg.synth import demo_maps_1d


def test_ot_map_identity(unit_grid):
    d = truncated_normal(unit_grid, 0.5, 0.1)
    t = ot_map(d, d)
    bulk = d.values > 1e-3 * d.values.max()
    assert np.max(np.abs(t.values - unit_grid.nodes)[bulk]) <= unit_grid.h


def test_ot_map_translation(unit_grid):
    a = truncated_normal(unit_grid, 0.4, 0.05)
    b = truncated_normal(unit_grid, 0.5, 0.05)
    t = ot_map(a, b)
    bulk = (unit_grid.nodes > 0.3) & (unit_grid.nodes < 0.5)
    assert np.max(np.abs(t.values - unit_grid.nodes - 0.1)[bulk]) <= 2 * unit_grid.h


def test_ot_map_recovers_analytic_map():
    g = Grid1D(0.0, 1.0, 2001)
    src = truncated_normal(g, 0.5, 0.1)
    t1 = demo_maps_1d(g.nodes)[0]
    tgt = pushforward(src, TransportMap1D(g, t1))
    t = ot_map(src, tgt)
    from kantoreg import cdf
    F = cdf(src).values
    band = (F >= 0.01) & (F <= 0.99)
    assert np.max(np.abs(t.values - t1)[band]) < 5e-3


def test_ot_map_domain_mismatch():
    a = Density1D.uniform(Grid1D(0.0, 1.0, 101))
    b = Density1D.uniform(Grid1D(0.0, 2.0, 101))
    with pytest.raises(DomainError):
        ot_map(a, b)
    t = ot_map(a, b, align=True)
    assert np.allclose(t.values, a.grid.nodes, atol=1e-9)


def test_w2_examples(unit_grid):
    a = truncated_normal(unit_grid, 0.4, 0.05)
    b = truncated_normal(unit_grid, 0.6, 0.05)
    assert abs(w2(a, b) - 0.2) < 1e-3
    assert w2(a, a) < 1e-12


@given(st.floats(-0.2, 0.2))
def test_w2_translation(c):
    g = Grid1D(0.0, 1.0, 1001)
    a = truncated_normal(g, 0.5, 0.04)
    b = truncated_normal(g, 0.5 + c, 0.04)
    assert abs(w2(a, b) - abs(c)) < 1e-3


@given(st.floats(0.3, 0.7), st.floats(0.05, 0.2), st.floats(0.3, 0.7), st.floats(0.05, 0.2))
def test_w2_symmetric_and_monotone_map(m1, s1, m2, s2):
    g = Grid1D(0.0, 1.0, 401)
    a, b = truncated_normal(g, m1, s1), truncated_normal(g, m2, s2)
    assert abs(w2(a, b) - w2(b, a)) < 1e-12
    assert ot_map(a, b).is_monotone()


def test_potential_identity_and_shift(unit_grid):
    ref = Density1D.uniform(unit_grid)
    assert np.allclose(potential_from_map(TransportMap1D.identity(unit_grid), ref).values, 0.0)
    x = unit_grid.nodes
    pot = potential_from_map(TransportMap1D(unit_grid, x + 0.1), ref)
    assert np.allclose(pot.deriv, -0.1)
    assert np.allclose(pot.values - pot.values[0], -0.1 * x, atol=1e-12)
    assert abs(ref.expect(pot.values)) < 1e-8


def test_potential_rejects_non_monotone(unit_grid):
    x = unit_grid.nodes
    with pytest.raises(NonMonotoneMapError, match="not cyclically monotone"):
        potential_from_map(TransportMap1D(unit_grid, 1 - x), Density1D.uniform(unit_grid))


@given(st.floats(0.3, 0.7), st.floats(0.05, 0.2))
def test_potential_consistency(m, s):
    g = Grid1D(0.0, 1.0, 801)
    ref = truncated_normal(g, 0.5, 0.15)
    pot = potential_from_map(ot_map(ref, truncated_normal(g, m, s)), ref)
    assert abs(ref.expect(pot.values)) < 1e-8
    # central differences agree to O(h^2) where the map is smooth; the
    # piecewise-linear quantile adds its own O(h^2) wobble, hence the constant
    from kantoreg import cdf
    F = cdf(ref).values
    bulk = (F > 0.01) & (F < 0.99)
    fd = np.gradient(pot.values, g.h)
    third = np.gradient(pot.curvature(), g.h)
    bound = 10 * g.h ** 2 * max(1.0, np.max(np.abs(third[bulk])))
    assert np.max(np.abs(fd - pot.deriv)[bulk]) <= bound
    assert np.max(np.abs(pot.deriv)) <= 1.0


def test_pushforward_identity(unit_grid):
    d = truncated_normal(unit_grid, 0.5, 0.1)
    out = pushforward(d, TransportMap1D.identity(unit_grid))
    assert np.max(np.abs(out.values - d.values)) < 1e-9


def test_pushforward_affine(unit_grid):
    x = unit_grid.nodes
    out = pushforward(Density1D.uniform(unit_grid), TransportMap1D(unit_grid, 0.5 * x + 0.25))
    inner = (x > 0.25 + unit_grid.h) & (x < 0.75 - unit_grid.h)
    outer = (x < 0.25 - unit_grid.h) | (x > 0.75 + unit_grid.h)
    # trapezoid renormalisation of a jump costs O(h) in height
    assert np.max(np.abs(out.values[inner] - 2.0)) <= 2.0 * 2 * unit_grid.h
    assert np.all(out.values[outer] == 0)


def test_pushforward_roundtrip(unit_grid):
    mu = truncated_normal(unit_grid, 0.45, 0.12)
    nu = truncated_normal(unit_grid, 0.6, 0.07)
    assert w2(pushforward(mu, ot_map(mu, nu)), nu) <= 2 * unit_grid.h


def test_pushforward_leaving_domain(unit_grid):
    with pytest.raises(DomainError):
        pushforward(Density1D.uniform(unit_grid), TransportMap1D(unit_grid, unit_grid.nodes + 0.2))


def test_barycenter_examples(unit_grid):
    a = truncated_normal(unit_grid, 0.4, 0.05)
    b = truncated_normal(unit_grid, 0.6, 0.05)
    assert w2(barycenter([a, a]), a) <= unit_grid.h
    assert w2(barycenter([a, b]), truncated_normal(unit_grid, 0.5, 0.05)) <= 2e-3


def test_barycenter_demo_triple(demo_1d):
    mbar, mus, _ = demo_1d
    assert w2(barycenter(mus), mbar) <= 2e-3


def test_barycenter_errors(unit_grid):
    d = Density1D.uniform(unit_grid)
    with pytest.raises(ValueError):
        barycenter([])
    with pytest.raises(ValueError):
        barycenter([d, d], weights=[0.5, 0.6])
