"""Euler-Maruyama simulation of the N-particle system with common noise.

Arrays are batched over independent realisations ("paths"):
``states[k, p, i]`` is particle ``i`` of path ``p`` at ``t_k``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import BlowUpError, UnsupportedModelError
from .model import ModelSpec
from .rng import TAG_AUX, TAG_COMMON, TAG_IDIO, TAG_INIT, counter_normals


@dataclass(frozen=True)
class ParticlePaths:
    times: np.ndarray   # (K+1,)
    states: np.ndarray  # (K+1, P, N, d)
    dW: np.ndarray      # (K, P, N, n)
    dW0: np.ndarray     # (K, P, m)
    seed: Optional[int] = None
    path0: int = 0

    @property
    def K(self) -> int:
        return self.times.size - 1

    @property
    def P(self) -> int:
        return self.states.shape[1]

    @property
    def N(self) -> int:
        return self.states.shape[2]

    @property
    def dt(self) -> float:
        return float(self.times[1] - self.times[0])


@dataclass(frozen=True)
class LimitPaths:
    times: np.ndarray
    states: np.ndarray     # (K+1, P, M, d), i.i.d. copies given W0
    cond_mean: np.ndarray  # (K+1, P, d), mean of the conditional law given W0
    cond_cov: np.ndarray   # (K+1, d, d), its covariance (W0-independent here)


def time_grid(T: float, K: int) -> np.ndarray:
    return np.linspace(0.0, T, K + 1)


def brownian_increments(seed: int, K: int, dt: float, P: int, N: int, n: int, m: int, path0: int = 0):
    """Idiosyncratic ``(K, P, N, n)`` and common ``(K, P, m)`` increments."""
    root = np.sqrt(dt)
    dW = root * counter_normals(seed, TAG_IDIO, K, P, N, n, path0=path0)
    dW0 = root * counter_normals(seed, TAG_COMMON, K, P, 1, m, path0=path0)[:, :, 0, :]
    return dW, dW0


def coarsen(increments: np.ndarray, factor: int) -> np.ndarray:
    """Sum consecutive blocks of ``factor`` steps (leading axis) of Brownian increments."""
    K = increments.shape[0]
    if factor < 1 or K % factor:
        raise ValueError(f"cannot coarsen {K} steps by {factor}")
    return increments.reshape((K // factor, factor) + increments.shape[1:]).sum(axis=1)


def initial_atoms(spec: ModelSpec, seed: int, P: int, N: int, path0: int = 0) -> np.ndarray:
    z = counter_normals(seed, TAG_INIT, 1, P, N, spec.d, path0=path0)[0]
    return np.asarray(spec.mu0_sampler(z), dtype=float)


def _euler(spec: ModelSpec, times, x0, dW, dW0, mean_field=None):
    K = times.size - 1
    states = np.empty((K + 1,) + x0.shape)
    states[0] = x0
    for k in range(K):
        t = float(times[k])
        dt = float(times[k + 1] - times[k])
        x = states[k]
        mu = x if mean_field is None else mean_field(k, x)
        drift = spec.drift_b(t, x, mu)
        sig = spec.vol_sigma(t, x, mu)
        sig0 = spec.vol_sigma0(t, x, mu)
        nxt = (x + drift * dt + (sig @ dW[k][..., None])[..., 0]
               + (sig0 @ dW0[k][:, None, :, None])[..., 0])
        if not np.all(np.isfinite(nxt)):
            _, p, i, _ = np.argwhere(~np.isfinite(nxt[None]))[0]
            raise BlowUpError(f"non-finite state at step {k + 1}, path {p}, particle {i}", step=k + 1, particle=int(i))
        states[k + 1] = nxt
    return states


def simulate_particles(
    spec: ModelSpec,
    N: int,
    K: int,
    seed: int,
    P: int = 1,
    *,
    x0: Optional[np.ndarray] = None,
    dW: Optional[np.ndarray] = None,
    dW0: Optional[np.ndarray] = None,
    path0: int = 0,
) -> ParticlePaths:
    """Explicit Euler-Maruyama for ``P`` independent N-particle systems.

    The measure argument at step k is the empirical measure of all N particles
    of the same path at t_k; the common increment is shared by those particles.
    ``x0``/``dW``/``dW0`` override the counter-RNG draws (same shapes as the
    corresponding ``ParticlePaths`` fields, ``x0`` being ``(P, N, d)``).
    """
    if N < 1 or K < 1 or P < 1:
        raise ValueError("N, K and P must be >= 1")
    times = time_grid(spec.horizon_T, K)
    dt = spec.horizon_T / K
    if dW is None or dW0 is None:
        gen_dW, gen_dW0 = brownian_increments(seed, K, dt, P, N, spec.n, spec.m, path0)
        dW = gen_dW if dW is None else dW
        dW0 = gen_dW0 if dW0 is None else dW0
    if x0 is None:
        x0 = initial_atoms(spec, seed, P, N, path0)
    x0 = np.asarray(x0, dtype=float).reshape(P, N, spec.d)
    dW = np.asarray(dW, dtype=float).reshape(K, P, N, spec.n)
    dW0 = np.asarray(dW0, dtype=float).reshape(K, P, spec.m)
    states = _euler(spec, times, x0, dW, dW0)
    return ParticlePaths(times, states, dW, dW0, seed, path0)


def simulate_limit(spec: ModelSpec, paths: ParticlePaths, M: Optional[int] = None) -> LimitPaths:
    """i.i.d. copies of the McKean-Vlasov limit sharing the common noise of ``paths``.

    Requires the affine structure: the measure argument is then replaced by the
    conditional Gaussian law given W0, propagated by its exact Euler recursion.
    With ``M=None`` the copies reuse the particles' initial atoms and
    idiosyncratic increments (synchronous coupling, M = N); otherwise M copies
    draw fresh idiosyncratic noise from a separate stream.
    """
    aff = spec.affine
    if aff is None:
        raise UnsupportedModelError("simulate_limit needs an affine drift with constant volatilities")
    K, P, d = paths.K, paths.P, spec.d
    times = paths.times
    if M is None:
        x0, dW = paths.states[0], paths.dW
    else:
        seed = 0 if paths.seed is None else paths.seed
        z = counter_normals(seed, TAG_AUX, 1, P, M, d, path0=paths.path0, step0=2**31)[0]
        x0 = np.asarray(spec.mu0_sampler(z), dtype=float)
        dW = np.sqrt(paths.dt) * counter_normals(seed, TAG_AUX, K, P, M, spec.n, path0=paths.path0)
    B1, B2 = aff.b1, aff.b2
    s, s0 = aff.sigma, aff.sigma0
    mean = np.empty((K + 1, P, d))
    cov = np.empty((K + 1, d, d))
    mean[0] = aff.mu0_mean
    cov[0] = aff.mu0_cov
    states = np.empty((K + 1,) + x0.shape)
    states[0] = x0
    eye = np.eye(d)
    for k in range(K):
        dt = float(times[k + 1] - times[k])
        m_k = mean[k]
        x = states[k]
        common = paths.dW0[k] @ s0.T                     # (P, d)
        drift = aff.b0 + x @ B1.T + (m_k @ B2.T)[:, None, :]
        states[k + 1] = x + drift * dt + dW[k] @ s.T + common[:, None, :]
        mean[k + 1] = m_k + (aff.b0 + m_k @ (B1 + B2).T) * dt + common
        A = eye + B1 * dt
        cov[k + 1] = A @ cov[k] @ A.T + s @ s.T * dt
    return LimitPaths(times, states, mean, cov)


def moment_monitor(paths: ParticlePaths, p: int = 4) -> float:
    """``max_t mean_paths |X_t|^p`` with ``|X|`` the norm of the whole configuration."""
    if p not in (2, 4, 8):
        raise ValueError("p must be 2, 4 or 8")
    sq = np.sum(paths.states**2, axis=(-2, -1))   # (K+1, P)
    return float(np.max(np.mean(sq ** (p / 2), axis=1)))


def write_paths_csv(paths: ParticlePaths, path, realisation: int = 0) -> None:
    """Columns ``k, t, i, x_1..x_d`` for one realisation (default the first)."""
    d = paths.states.shape[-1]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["k", "t", "i"] + [f"x_{j + 1}" for j in range(d)])
        for k, t in enumerate(paths.times):
            for i in range(paths.N):
                w.writerow([k, repr(float(t)), i] + [repr(float(v)) for v in paths.states[k, realisation, i]])
