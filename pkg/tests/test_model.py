import numpy as np
import pytest
from hypothesis import given, strategies as st

from mfparticles.errors import EvaluationError, InvertibilityError
from mfparticles.model import (
    LqParams, build_control_driver, grid_minimizer, lq_model, scan_minimizer, validate_assumptions,
)

from conftest import const_vol, make_spec


def test_quadratic_control_driver():
    beta = lambda t, x, mu, a: a
    f = lambda x, mu, a: np.sum(a * a, -1)
    H = build_control_driver(beta, f, 0.0, lambda t, x, mu, z: -np.asarray(z) / 2)
    z = np.array([[[2.0]]])
    assert H(0.0, np.zeros((1, 1, 1)), np.zeros((1, 1, 1)), 0.0, z)[0, 0] == pytest.approx(-1.0)


def test_discount_only_driver():
    beta = lambda t, x, mu, a: np.zeros(np.shape(x))
    f = lambda x, mu, a: np.zeros(np.shape(x)[:-1])
    H = build_control_driver(beta, f, 1.0, lambda t, x, mu, z: np.zeros(np.shape(z)))
    assert H(0.0, np.zeros((1, 1)), np.zeros((1, 1)), 3.0, np.ones((1, 1)))[0] == pytest.approx(-3.0)


def test_finite_control_set_matches_enumeration():
    beta = lambda t, x, mu, a: a
    f = lambda x, mu, a: np.zeros(np.shape(a)[:-1])
    H = build_control_driver(beta, f, 0.0, scan_minimizer(beta, f, [-1.0, 0.0, 1.0]))
    z = np.array([[0.7]])
    brute = min(a * 0.7 for a in (-1.0, 0.0, 1.0))
    assert H(0.0, np.zeros((1, 1)), np.zeros((1, 1)), 0.0, z)[0] == pytest.approx(brute) == pytest.approx(-0.7)


def test_non_finite_cost_reports_arguments():
    beta = lambda t, x, mu, a: a
    f = lambda x, mu, a: np.full(np.shape(a)[:-1], np.inf)
    H = build_control_driver(beta, f, 0.0, lambda t, x, mu, z: np.zeros(np.shape(z)))
    with pytest.raises(EvaluationError, match="f returned non-finite"):
        H(0.0, np.ones((2, 1)), np.ones((2, 1)), 0.0, np.ones((2, 1)))


def test_lq_zero_costs_driver():
    spec = lq_model(LqParams(q=0.0, qbar=0.0, g=0.0, gbar=0.0, a=0.3))
    rng = np.random.default_rng(0)
    x = rng.standard_normal((5, 4, 1))
    z = rng.standard_normal((5, 4, 1))
    H = spec.driver_H(0.2, x, x, 0.0, z)
    assert np.allclose(H, 0.3 * x[..., 0] * z[..., 0] - z[..., 0] ** 2 / 4)


def test_lq_driver_against_grid_scan():
    p = LqParams.acceptance()
    spec = lq_model(p)
    beta, f = spec.control
    scan = lq_model(p, minimizer=grid_minimizer(beta, f, -5.0, 5.0))
    rng = np.random.default_rng(1)
    x = rng.uniform(-2, 2, (10, 6, 1))
    z = rng.uniform(-3, 3, (10, 6, 1))
    exact = spec.driver_H(0.5, x, x, 0.0, z)
    approx = scan.driver_H(0.5, x, x, 0.0, z)
    # grid spacing 0.01: scan error is at most rho * (0.005)^2
    assert np.all(approx >= exact - 1e-12)
    assert np.max(approx - exact) <= p.rho * 0.005**2 + 1e-12


@given(st.floats(-5, 5), st.floats(-5, 5), st.floats(-5, 5), st.floats(0, 1))
def test_driver_hb_identity(x, z, y, t):
    spec = lq_model(LqParams.acceptance())
    xs = np.array([[[x], [0.3], [-1.2]]])
    zs = np.array([[[z], [0.1], [2.0]]])
    lhs = spec.driver_Hb(t, xs, xs, y, zs) + np.sum(spec.drift_b(t, xs, xs) * zs, -1)
    rhs = spec.driver_H(t, xs, xs, y, zs)
    assert np.allclose(lhs, rhs, rtol=1e-12, atol=1e-12)


def test_lq_rejects_non_positive_control_weight():
    with pytest.raises(ValueError, match="rho"):
        LqParams(rho=0.0)
    with pytest.raises(ValueError):
        LqParams(T=-1.0)


def test_lq_constant_paths_without_noise_and_drift():
    spec = lq_model(LqParams(sigma=0.0, sigma0=0.0, b1=0.0, b2=0.0))
    x = np.random.default_rng(0).standard_normal((2, 3, 1))
    assert np.all(spec.drift_b(0.0, x, x) == 0)
    assert np.all(spec.vol_sigma(0.0, x, x) == 0)


def test_validator_linear_drift():
    spec = make_spec(b=lambda t, x, mu: 0.5 * np.asarray(x), sigma=const_vol(1.0))
    rep = validate_assumptions(spec, probe_count=300)
    assert rep.lipschitz_b == pytest.approx(0.5, rel=1e-6)
    assert rep.lipschitz_sigma == 0.0
    assert rep.status == "observed"


def test_validator_second_moment_terminal_cost():
    spec = make_spec(sigma=const_vol(1.0), G=lambda mu: np.mean(np.sum(mu * mu, -1), -1))
    rep = validate_assumptions(spec, probe_count=300)
    assert 0 < rep.lipschitz_G <= 1.0 + 1e-12


def test_validator_singular_volatility():
    spec = make_spec()
    with pytest.raises(InvertibilityError) as info:
        validate_assumptions(spec, probe_count=10)
    assert info.value.points
    rep = validate_assumptions(spec, probe_count=10, raise_on_singular=False)
    assert rep.violations


def test_validator_lq_report():
    rep = validate_assumptions(lq_model(LqParams.acceptance()))
    vals = [rep.lipschitz_b, rep.lipschitz_sigma, rep.lipschitz_sigma0, rep.lipschitz_Hb_yz,
            rep.lipschitz_Hb_xmu, rep.lipschitz_G, rep.sigma_pinv_max_norm, rep.mu0_moment]
    assert all(np.isfinite(v) for v in vals)
    assert rep.sigma_pinv_max_norm == pytest.approx(1 / 0.4)
    assert not rep.violations and rep.origin_coefficients_finite


def test_validator_needs_two_probes():
    with pytest.raises(ValueError):
        validate_assumptions(lq_model(LqParams()), probe_count=1)


def test_growth_constant_is_finite(fixture_lq):
    _, sol, an = fixture_lq
    rng = np.random.default_rng(3)
    clouds = [rng.standard_normal((10, 1)) for _ in range(4)]
    L = an.growth_constant(np.linspace(0, 1, 5), clouds)
    assert np.isfinite(L) and L > 0
