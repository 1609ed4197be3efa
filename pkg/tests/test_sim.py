import csv

import numpy as np
import pytest
from hypothesis import given, strategies as st

from mfparticles.analysis import fit_rate
from mfparticles.errors import BlowUpError, UnsupportedModelError
from mfparticles.model import LqParams, geometric_model, lq_model
from mfparticles.sim import (
    coarsen, moment_monitor, simulate_limit, simulate_particles, write_paths_csv,
)

from conftest import affine_1d, const_vol, make_spec


def test_zero_coefficients_freeze_particles():
    paths = simulate_particles(make_spec(), N=5, K=8, seed=1, P=3)
    assert np.all(paths.states == paths.states[0])


def test_unit_drift_translates_exactly():
    spec = make_spec(b=lambda t, x, mu: np.ones(np.shape(x)))
    paths = simulate_particles(spec, N=4, K=16, seed=2, P=2)
    assert np.array_equal(paths.states[-1], paths.states[0] + 1.0)


def test_initial_atoms_follow_mu0():
    spec = lq_model(LqParams.acceptance())
    x0 = simulate_particles(spec, N=64, K=1, seed=3, P=256).states[0].ravel()
    assert abs(x0.mean() - 0.5) < 4 * 0.5 / np.sqrt(x0.size)
    assert abs(x0.std() - 0.5) < 0.02


def test_increment_variance():
    spec = lq_model(LqParams.acceptance())
    paths = simulate_particles(spec, N=8, K=16, seed=4, P=2000)
    dt = paths.dt
    v_idio = paths.dW.var(axis=(1, 2, 3))
    v_common = paths.dW0.var(axis=(1, 2))
    assert np.allclose(v_idio, dt, rtol=0.05)
    assert np.allclose(v_common, dt, rtol=0.15)


@given(st.permutations(range(6)))
def test_exchangeability_is_bitwise(perm):
    spec = lq_model(LqParams.acceptance())
    base = simulate_particles(spec, N=6, K=8, seed=5, P=2)
    perm = list(perm)
    moved = simulate_particles(spec, N=6, K=8, seed=5, P=2, x0=base.states[0][:, perm],
                               dW=base.dW[:, :, perm], dW0=base.dW0)
    assert np.array_equal(moved.states, base.states[:, :, perm])


def test_common_noise_keeps_equal_particles_equal():
    spec = make_spec(b=lambda t, x, mu: -np.asarray(x) ** 3, sigma0=const_vol(0.5),
                     mu0=lambda z: np.zeros(np.shape(z)))
    paths = simulate_particles(spec, N=7, K=32, seed=6, P=3)
    assert np.all(paths.states == paths.states[:, :, :1])
    assert np.any(paths.states[-1] != 0)


def test_determinism_and_path_offsets():
    spec = lq_model(LqParams.acceptance())
    a = simulate_particles(spec, N=4, K=8, seed=7, P=5)
    b = simulate_particles(spec, N=4, K=8, seed=7, P=5)
    assert np.array_equal(a.states, b.states)
    tail = simulate_particles(spec, N=4, K=8, seed=7, P=2, path0=3)
    assert np.array_equal(a.states[:, 3:], tail.states)


def test_blow_up_reports_step_and_particle():
    spec = make_spec(b=lambda t, x, mu: 1e200 * np.asarray(x) ** 2, mu0=lambda z: 1.0 + 0 * np.asarray(z))
    with pytest.raises(BlowUpError) as info, np.errstate(over="ignore", invalid="ignore"):
        simulate_particles(spec, N=3, K=8, seed=0)
    assert info.value.step is not None and info.value.particle is not None


def test_coarsen_sums_blocks():
    dW = np.arange(8.0).reshape(8, 1, 1, 1)
    assert coarsen(dW, 4).ravel().tolist() == [6.0, 22.0]
    with pytest.raises(ValueError):
        coarsen(dW, 3)


def test_geometric_strong_order_pooled():
    spec = geometric_model()
    fine = simulate_particles(spec, N=1, K=256, seed=9, P=1024)
    exact = np.exp(0.03 + 0.2 * fine.dW.sum(axis=0)[:, 0, 0])
    pts = []
    for K in (16, 32, 64, 128, 256):
        f = 256 // K
        coarse = simulate_particles(spec, N=1, K=K, seed=9, P=1024, dW=coarsen(fine.dW, f), dW0=coarsen(fine.dW0, f))
        pts.append((1.0 / K, np.mean(np.abs(coarse.states[-1, :, 0, 0] - exact))))
    assert 0.45 <= fit_rate(pts).slope <= 0.55


def test_limit_constant_mean_without_dynamics():
    spec = make_spec(affine=affine_1d(mean0=0.7, std0=0.2), mu0=lambda z: 0.7 + 0.2 * np.asarray(z))
    lim = simulate_limit(spec, simulate_particles(spec, N=4, K=8, seed=1, P=2))
    assert np.all(lim.cond_mean == 0.7)
    assert np.allclose(lim.cond_cov, 0.04)


def test_limit_mean_decay():
    spec = make_spec(b=lambda t, x, mu: -np.asarray(x), affine=affine_1d(b1=-1.0, mean0=1.0),
                     mu0=lambda z: 1.0 + np.asarray(z))
    K = 64
    lim = simulate_limit(spec, simulate_particles(spec, N=2, K=K, seed=1, P=1))
    expected = np.exp(-lim.times)
    assert np.max(np.abs(lim.cond_mean[:, 0, 0] - expected)) <= 1.0 / K


def test_limit_descriptor_against_large_proxy():
    spec = lq_model(LqParams.acceptance())
    proxy = simulate_particles(spec, N=10_000, K=32, seed=2, P=1)
    lim = simulate_limit(spec, proxy)
    gap = np.max(np.abs(lim.cond_mean[:, 0, 0] - proxy.states[:, 0].mean(axis=(-2, -1))))
    assert gap <= 5 / np.sqrt(10_000)


def test_limit_copies_share_noise_and_fresh_copies_tracked():
    spec = lq_model(LqParams.acceptance())
    paths = simulate_particles(spec, N=8, K=16, seed=3, P=4)
    paired = simulate_limit(spec, paths)
    assert paired.states.shape == paths.states.shape
    assert np.array_equal(paired.states[0], paths.states[0])
    fresh = simulate_limit(spec, paths, M=5000)
    mean_gap = np.abs(fresh.states[:, :, :, 0].mean(axis=-1) - fresh.cond_mean[:, :, 0])
    assert np.max(mean_gap) < 5 / np.sqrt(5000)


def test_limit_requires_affine_structure():
    with pytest.raises(UnsupportedModelError):
        simulate_limit(geometric_model(), simulate_particles(geometric_model(), N=1, K=4, seed=0))


def test_moment_monitor_examples():
    zero = simulate_particles(make_spec(mu0=lambda z: 0 * np.asarray(z)), N=3, K=4, seed=0)
    assert moment_monitor(zero, 4) == 0
    still = simulate_particles(make_spec(), N=3, K=4, seed=0)
    norm = np.linalg.norm(still.states[0, 0])
    assert moment_monitor(still, 2) == pytest.approx(norm**2)
    assert moment_monitor(still, 8) == pytest.approx(norm**8)
    with pytest.raises(ValueError):
        moment_monitor(still, 3)


def test_moment_monitor_stable_under_refinement():
    spec = lq_model(LqParams.acceptance())
    coarse = moment_monitor(simulate_particles(spec, N=8, K=64, seed=4, P=256), 4)
    fine = moment_monitor(simulate_particles(spec, N=8, K=256, seed=4, P=256), 4)
    assert np.isfinite(coarse) and 0.5 <= coarse / fine <= 2.0


def test_paths_csv(tmp_path):
    spec = lq_model(LqParams.acceptance())
    paths = simulate_particles(spec, N=3, K=2, seed=1, P=2)
    out = tmp_path / "paths.csv"
    write_paths_csv(paths, out)
    rows = list(csv.reader(open(out)))
    assert rows[0] == ["k", "t", "i", "x_1"]
    assert len(rows) == 1 + 3 * 3
    assert float(rows[-1][3]) == paths.states[2, 0, 2, 0]
