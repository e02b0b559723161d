import math

import numpy as np
import pytest
import sympy as sp
from hypothesis import given, strategies as st

from pinnda import autodiff as ad
from pinnda import problems as P
from pinnda.quadrature import Disc, Union


def jet_of(value, d1, d2):
    """Wrap arrays (B, m), (d, B, m), (d, B, m) as a constant jet."""
    c = ad.constant
    return ad.Jet2(c(np.asarray(value, float)), c(np.asarray(d1, float)), c(np.asarray(d2, float)))


def sym_fields(spec_id):
    """Exact fields written out independently, as sympy expressions."""
    x1, x2, t = sp.symbols("x1 x2 t")
    if spec_id == "poisson":
        return (x1, x2), [30 * x1 * x2 * (1 - x1) * (1 - x2)]
    if spec_id == "heat1d":
        return (x1, t), [sp.exp(-4 * sp.pi**2 * t**2) * sp.sin(2 * sp.pi * x1)]
    if spec_id == "wave":
        return (x1, t), [sp.sin(2 * sp.pi * t) * sp.sin(2 * sp.pi * x1)]
    if spec_id == "stokes":
        return (x1, x2), [4 * x1 * x2**3, x1**4 - x2**4, 12 * x1**2 * x2 - 4 * x2**3 - 1]
    raise KeyError(spec_id)


CASES = [("poisson", "poisson"), ("heat1d", "heat1d"), ("wave-gcc", "wave"), ("stokes", "stokes")]


@pytest.mark.parametrize("spec_id,sym_id", CASES)
def test_closed_forms_match_symbolic_derivatives(spec_id, sym_id, rng):
    spec = P.get_spec(spec_id)
    xs, fields = sym_fields(sym_id)
    pts = rng.uniform(0.05, 0.95, (30, 2)) * [1, spec.domain.as_box().hi[-1] if spec.time_dependent else 1]
    for k, u in enumerate(fields):
        f = sp.lambdify(xs, u, "numpy")
        np.testing.assert_allclose(spec.exact(pts)[:, k], f(*pts.T), rtol=1e-13, atol=1e-13)
        for i, xi in enumerate(xs):
            g = sp.lambdify(xs, sp.diff(u, xi), "numpy")(*pts.T)
            h = sp.lambdify(xs, sp.diff(u, xi, 2), "numpy")(*pts.T)
            np.testing.assert_allclose(spec.exact_grad(pts)[:, k, i], g, rtol=1e-12, atol=1e-11)
            np.testing.assert_allclose(spec.exact_d2(pts)[:, k, i], h, rtol=1e-12, atol=1e-10)


def test_poisson_source_is_negative_laplacian(rng):
    xs, (u,) = sym_fields("poisson")
    f = sp.lambdify(xs, -sp.diff(u, xs[0], 2) - sp.diff(u, xs[1], 2), "numpy")
    pts = rng.random((50, 2))
    np.testing.assert_allclose(P.get_spec("poisson").source(pts)[:, 0], f(*pts.T), rtol=1e-13)


def test_poisson_printed_source_has_opposite_sign(rng):
    pts = rng.random((10, 2))
    np.testing.assert_allclose(P.poisson_spec(printed_source=True).source(pts), -P.poisson_spec().source(pts))


def test_heat1d_source_derived_from_printed_field(rng):
    xs, (u,) = sym_fields("heat1d")
    f = sp.lambdify(xs, sp.diff(u, xs[1]) - sp.diff(u, xs[0], 2), "numpy")
    pts = rng.random((50, 2)) * [1, 0.02]
    np.testing.assert_allclose(P.get_spec("heat1d").source(pts)[:, 0], f(*pts.T), rtol=1e-12, atol=1e-12)


def test_heat1d_decay_variant_is_source_free(rng):
    spec = P.heat1d_spec("decay")
    pts = rng.random((50, 2)) * [1, 0.02]
    np.testing.assert_allclose(spec.source(pts), 0.0, atol=1e-11)


def test_stokes_fields_solve_homogeneous_system():
    xs, (u1, u2, p) = sym_fields("stokes")
    lap = lambda w: sp.diff(w, xs[0], 2) + sp.diff(w, xs[1], 2)  # noqa: E731
    assert sp.simplify(-lap(u1) + sp.diff(p, xs[0])) == 0
    assert sp.simplify(-lap(u2) + sp.diff(p, xs[1])) == 0
    assert sp.simplify(sp.diff(u1, xs[0]) + sp.diff(u2, xs[1])) == 0
    # the other sign convention leaves a residual
    assert sp.simplify(lap(u1) + sp.diff(p, xs[0])) != 0


@pytest.mark.parametrize("spec_id", sorted(P.builtin_specs()))
def test_oracle_fields_annihilate_residuals(spec_id, rng):
    spec = P.get_spec(spec_id)
    box = spec.domain.as_box() if spec.time_dependent else spec.domain
    pts = box.scale(rng.random((200, spec.input_dim)))
    for r in P.pde_residuals(spec, P.oracle_jet(spec, pts), pts):
        assert np.max(np.abs(r.value)) <= 1e-10
    obs = P.observed_components(spec)
    g = P.make_data(spec, pts, 0.0)
    assert np.max(np.abs(P.data_residual(ad.constant(spec.exact(pts)[:, obs]), g).value)) == 0.0


def test_laplacian_of_quadratic():
    b = 5
    x = np.random.default_rng(0).random((b, 2))
    jet = jet_of((x**2).sum(1, keepdims=True), (2 * x.T)[:, :, None], np.full((2, b, 1), 2.0))
    np.testing.assert_array_equal(P.poisson_residuals(jet, np.zeros(b)).value, -4.0)


def test_heat_constant_field():
    b = 4
    jet = jet_of(np.full((b, 1), 3.0), np.zeros((2, b, 1)), np.zeros((2, b, 1)))
    np.testing.assert_array_equal(P.heat_residuals(jet, 0.0).value, 0.0)
    np.testing.assert_array_equal(P.boundary_residual(jet.value, 0.0).value, 3.0)


def test_heatnd_residual_cancels_exactly(rng):
    spec = P.heatnd_spec(4)
    pts = rng.random((20, 5))
    (r,) = P.pde_residuals(spec, P.oracle_jet(spec, pts), pts)
    assert np.max(np.abs(r.value)) <= 1e-14


def test_wave_time_squared_with_unit_source():
    b = 3
    t = np.linspace(0.1, 0.9, b)
    d2 = np.zeros((2, b, 1))
    d2[1] = 2.0
    jet = jet_of((t**2)[:, None], np.zeros((2, b, 1)), d2)
    np.testing.assert_array_equal(P.wave_residuals(jet, np.full(b, 2.0)).value, 0.0)


def test_wave_trace_vanishes_on_sides():
    spec = P.get_spec("wave-gcc")
    t = np.linspace(0, 1, 11)
    pts = np.concatenate([np.column_stack([np.zeros(11), t]), np.column_stack([np.ones(11), t])])
    assert np.max(np.abs(spec.boundary_value(pts))) < 1e-14


def test_rotational_field_is_divergence_free():
    b = 6
    x = np.random.default_rng(1).random((b, 2))
    value = np.column_stack([x[:, 1], -x[:, 0], np.zeros(b)])
    d1 = np.zeros((2, b, 3))
    d1[1, :, 0] = 1.0
    d1[0, :, 1] = -1.0
    _, div = P.stokes_residuals(jet_of(value, d1, np.zeros((2, b, 3))), 0.0)
    np.testing.assert_array_equal(div.value, 0.0)


def test_stokes_constant_pressure_zero_velocity():
    b = 3
    mom, div = P.stokes_residuals(jet_of(np.tile([0, 0, 5.0], (b, 1)), np.zeros((2, b, 3)), np.zeros((2, b, 3))), 0.0)
    assert not np.any(mom.value) and not np.any(div.value)


# -- data ---------------------------------------------------------------------


def test_poisson_peak_amplitude():
    assert P.get_spec("poisson").exact(np.array([[0.5, 0.5]]))[0, 0] == 30 / 16


def test_noise_free_data_is_exact(rng):
    spec = P.get_spec("poisson")
    pts = rng.random((20, 2))
    assert np.array_equal(P.make_data(spec, pts), spec.exact(pts))


def test_noise_statistics():
    spec = P.get_spec("poisson")
    sets = P.make_training_sets(spec, 1600, seed=0)
    pts = sets.data.points
    assert len(pts) >= 500
    clean = P.make_data(spec, pts, 0.0)
    a = P.make_data(spec, pts, 0.01, seed=3)
    assert np.array_equal(a, P.make_data(spec, pts, 0.01, seed=3))
    amp = np.max(np.abs(clean))
    assert np.std(a - clean) == pytest.approx(0.01 * amp, rel=0.2)


def test_noise_only_changes_data():
    clean = P.make_training_sets(P.get_spec("poisson"), 400, seed=5)
    noisy = P.make_training_sets(P.get_spec("poisson-noisy"), 400, seed=5)
    assert np.array_equal(clean.interior.points, noisy.interior.points)
    assert np.array_equal(clean.data.points, noisy.data.points)
    assert not np.array_equal(clean.data_values, noisy.data_values)


# -- catalog ------------------------------------------------------------------


def test_poisson_split():
    assert P.get_spec("poisson").split(400) == (175, 0, 225)
    counts = P.make_training_sets(P.get_spec("poisson"), 400).counts
    assert counts == {"N_int": 175, "N_sb": 0, "N_d": 225}


@pytest.mark.parametrize("n", [1, 5, 10, 100])
def test_heatnd_counts(n):
    spec = P.get_spec(f"heatnd:{n}")
    assert spec.split(spec.default_n) == (8192, 2048, 6144)


def test_stokes_ratio():
    spec = P.get_spec("stokes")
    assert spec.data_fraction == pytest.approx(math.pi * 0.25**2, rel=1e-15)
    assert isinstance(spec.observation, Disc)


def test_wave_interior_fractions():
    assert P.get_spec("wave-gcc").split(3600)[0] == 2160
    assert P.get_spec("wave-nogcc").split(3600)[0] == 2880
    assert isinstance(P.get_spec("wave-gcc").observation.space, Union)


def test_heat1d_interior_fraction():
    assert P.get_spec("heat1d").split(800)[0] == 320


def test_unknown_problem():
    with pytest.raises(KeyError):
        P.get_spec("burgers")
    with pytest.raises(KeyError):
        P.get_spec("heatnd:x")


@given(st.sampled_from(sorted(P.builtin_specs())), st.integers(200, 5000))
def test_split_adds_up(spec_id, n):
    spec = P.get_spec(spec_id)
    n_int, n_sb, n_d = spec.split(n)
    assert n_int + n_sb + n_d == n
    assert min(n_int, n_d) > 0
    assert (n_sb > 0) == spec.has_boundary


@pytest.mark.parametrize("spec_id", sorted(P.builtin_specs()))
def test_observation_points_inside_observation_domain(spec_id):
    spec = P.get_spec(spec_id)
    sets = P.make_training_sets(spec, None if spec.fixed_counts else 800, seed=2)
    assert spec.observation.contains(sets.data.points).all()
    box = spec.domain.as_box() if spec.time_dependent else spec.domain
    assert box.contains(sets.interior.points).all()
