import csv

import numpy as np
import pytest

from mfparticles.bsde import BasisSpec, correction_term, evaluate_analytic, solve_lsmc, write_bsde_csv
from mfparticles.errors import BasisDegeneracyError, UnsupportedModelError
from mfparticles.lq import lq_problem
from mfparticles.model import AnalyticSolution, LqParams
from mfparticles.sim import simulate_particles

from conftest import const_vol, make_spec


def zero_solution(vN=True):
    zeros = lambda *a: np.zeros(np.shape(a[-1])[:-1]) if len(a) == 2 else 0
    return AnalyticSolution(
        v=lambda t, mu: np.zeros(np.shape(mu)[:-2]),
        dmu_v=lambda t, mu, x: np.zeros(np.shape(x)),
        dx_dmu_v=lambda t, mu, x: np.zeros(np.shape(x) + (1,)),
        d2mu_v=lambda t, mu, x, xp: np.zeros(np.shape(x) + (1,)),
        vN=(lambda t, xs: np.zeros(np.shape(xs)[:-2])) if vN else None,
        grad_vN=(lambda t, xs: np.zeros(np.shape(xs))) if vN else None,
    )


def test_analytic_zero_solution():
    spec = make_spec(sigma=const_vol(0.3))
    paths = simulate_particles(spec, N=4, K=8, seed=1, P=3)
    back = evaluate_analytic(zero_solution(), paths)
    assert np.all(back.Y == 0) and np.all(back.Z == 0) and back.method == "analytic"


def test_analytic_requires_vn():
    spec = make_spec(sigma=const_vol(0.3))
    with pytest.raises(UnsupportedModelError):
        evaluate_analytic(zero_solution(vN=False), simulate_particles(spec, N=2, K=2, seed=0))


def test_analytic_without_idiosyncratic_noise_matches_v():
    spec, sol, an = lq_problem(LqParams(sigma=0.0))
    paths = simulate_particles(spec, N=6, K=16, seed=2, P=4)
    back = evaluate_analytic(an, paths, spec)
    ref = np.array([an.v(float(t), paths.states[k]) for k, t in enumerate(paths.times)])
    assert np.max(np.abs(back.Y - ref)) <= 1e-15


def test_analytic_initial_value_closed_form(fixture_lq):
    spec, sol, an = fixture_lq
    paths = simulate_particles(spec, N=8, K=16, seed=3, P=5)
    back = evaluate_analytic(an, paths, spec)
    x0 = paths.states[0][..., 0]
    K0, L0 = sol.K[0], sol.L[0]
    closed = K0 * np.mean(x0**2, -1) + L0 * np.mean(x0, -1) ** 2 + sol.c_N(0.0, 8)
    assert np.max(np.abs(back.Y[0] - closed)) <= 1e-10


def test_lsmc_constant_terminal():
    spec = make_spec(sigma=const_vol(0.5), sigma0=const_vol(0.2), G=lambda mu: np.full(np.shape(mu)[:-2], 7.0))
    paths = simulate_particles(spec, N=4, K=8, seed=4, P=512)
    back = solve_lsmc(spec, paths)
    # exact up to the 1e-10 * trace ridge shrinkage accumulated over the steps
    assert np.allclose(back.Y, 7.0, rtol=0, atol=1e-6)
    assert np.allclose(back.Z, 0.0, rtol=0, atol=1e-6)


def test_lsmc_linear_discount():
    T = 1.0
    spec = make_spec(sigma=const_vol(0.5), G=lambda mu: np.ones(np.shape(mu)[:-2]),
                     H=lambda t, x, mu, y, z: -np.broadcast_to(np.asarray(y), np.shape(x)[:-1]))
    paths = simulate_particles(spec, N=4, K=32, seed=5, P=512)
    back = solve_lsmc(spec, paths)
    se = back.Y[0].std() / np.sqrt(paths.P)
    assert abs(back.Y[0].mean() - np.exp(-T)) <= 3 * se + 1e-4
    assert max(back.diagnostics["picard_passes"]) == 2


def test_lsmc_lq_initial_value(fixture_lq):
    spec, sol, an = fixture_lq
    paths = simulate_particles(spec, N=4, K=32, seed=6, P=2**14)
    lsmc = solve_lsmc(spec, paths)
    exact = evaluate_analytic(an, paths, spec)
    rel = abs(lsmc.Y[0].mean() - exact.Y[0].mean()) / abs(exact.Y[0].mean())
    assert rel <= 0.01
    assert lsmc.diagnostics["basis_size"] == BasisSpec().size(1, 1)
    assert not lsmc.diagnostics["unstable_steps"]


def test_terminal_consistency_across_backends(fixture_lq):
    spec, sol, an = fixture_lq
    paths = simulate_particles(spec, N=4, K=8, seed=7, P=256)
    a = evaluate_analytic(an, paths, spec)
    b = solve_lsmc(spec, paths)
    G = spec.terminal_G(paths.states[-1])
    assert np.array_equal(a.Y[-1], G) and np.array_equal(b.Y[-1], G)


def test_lsmc_error_contracts_with_paths(fixture_lq):
    spec, sol, an = fixture_lq
    errs = []
    for P in (2**12, 2**14):
        paths = simulate_particles(spec, N=4, K=32, seed=8, P=P)
        gap = np.abs(solve_lsmc(spec, paths).Y - evaluate_analytic(an, paths, spec).Y)
        errs.append(np.max(gap.mean(axis=1)))
    assert errs[1] <= 1.1 * errs[0]


def test_lsmc_degenerate_basis_names_step(fixture_lq):
    spec, _, _ = fixture_lq
    # a single particle makes xbar^2 and m2 identical
    paths = simulate_particles(spec, N=1, K=4, seed=9, P=512)
    with pytest.raises(BasisDegeneracyError) as info:
        solve_lsmc(spec, paths)
    assert info.value.step == 3 and info.value.condition > 1e12


def test_lsmc_requires_enough_paths(fixture_lq):
    spec, _, _ = fixture_lq
    with pytest.raises(ValueError, match="basis size"):
        solve_lsmc(spec, simulate_particles(spec, N=4, K=4, seed=0, P=32))


def test_basis_validation():
    with pytest.raises(ValueError):
        BasisSpec(y_terms=("xbar",))
    with pytest.raises(ValueError):
        BasisSpec(theta=0.3)
    with pytest.raises(ValueError):
        BasisSpec(z_terms=("x2",))


def test_correction_zero_for_linear_v():
    spec = make_spec(sigma=const_vol(0.3))
    corr = correction_term(spec, zero_solution(), simulate_particles(spec, N=3, K=4, seed=0, P=2))
    assert np.all(corr.idio == 0) and np.all(corr.full == 0)


def test_correction_lq_values_and_scaling(fixture_lq):
    spec, sol, an = fixture_lq
    p = sol.params
    series = {}
    for N in (4, 8):
        paths = simulate_particles(spec, N=N, K=16, seed=1, P=3)
        corr = correction_term(spec, an, paths)
        L = sol.coefficients(paths.times)[1][:, None]
        assert np.max(np.abs(corr.idio - p.sigma**2 * L / N)) <= 1e-8
        assert np.max(np.abs(corr.full - (p.sigma**2 + p.sigma0**2) * L / N)) <= 1e-8
        series[N] = corr.full
    assert np.allclose(series[8], series[4] / 2, rtol=1e-12)


def test_bsde_csv(tmp_path, fixture_lq):
    spec, sol, an = fixture_lq
    back = evaluate_analytic(an, simulate_particles(spec, N=3, K=2, seed=1, P=5), spec)
    out = tmp_path / "bsde.csv"
    write_bsde_csv(back, out, max_paths=2)
    rows = list(csv.reader(open(out)))
    assert rows[0] == ["k", "t", "path", "Y", "Z_mean_abs", "Z_max_abs"]
    assert len(rows) == 1 + 3 * 2
    assert float(rows[1][5]) == pytest.approx(np.abs(back.Z[0, 0]).max())
