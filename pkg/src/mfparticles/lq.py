"""Closed-form LQ mean-field control oracle.

Ansatz ``v(t, mu) = K(t) m2(mu) + L(t) mean(mu)^2 + chi(t)`` for the measure
PDE and ``vN(t, x) = K(t) (1/N) sum x_i^2 + L(t) xbar^2 + c_N(t)`` for the
N-particle PDE. Substituting into both equations gives

    K'   = K^2 / rho - q - 2 a K,                   K(T) = g
    L'   = (2 K L + L^2) / rho - qbar - 2 a L,      L(T) = gbar
    chi' = -(sigma^2 + sigma0^2) K - sigma0^2 L,    chi(T) = 0
    c_N' = chi' - sigma^2 L / N,                    c_N(T) = 0

so ``c_N - chi = (sigma^2 / N) int_t^T L ds``. The system is integrated
backwards with classical RK4, carrying ``Q(t) = int_t^T L ds`` as a fourth
component. Nothing here is trusted blindly: ``pde_residual`` and
``vN_residual`` plug the interpolated solution back into the PDEs with the
model's own Hamiltonian and finite-difference derivatives.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from typing import Iterable, Optional

import numpy as np
from scipy.interpolate import CubicHermiteSpline

from .empirical import EmpiricalMeasure, cloud_m2, cloud_mean
from .errors import HorizonTooLongError
from .model import AnalyticSolution, LqParams, ModelSpec, lq_model

BLOWUP = 1e8
MIN_GRID = 256


def _rhs(state: np.ndarray, p: LqParams) -> np.ndarray:
    K, L, _, _ = state
    return np.array([
        K * K / p.rho - p.q - 2 * p.a * K,
        (2 * K * L + L * L) / p.rho - p.qbar - 2 * p.a * L,
        -(p.sigma**2 + p.sigma0**2) * K - p.sigma0**2 * L,
        -L,
    ])


@dataclass(frozen=True)
class RiccatiSolution:
    params: LqParams
    grid: np.ndarray
    K: np.ndarray
    L: np.ndarray
    chi: np.ndarray
    Q: np.ndarray
    ode_params: LqParams

    def __post_init__(self):
        derivs = np.array([_rhs(s, self.ode_params) for s in zip(self.K, self.L, self.chi, self.Q)])
        values = np.stack([self.K, self.L, self.chi, self.Q], axis=1)
        object.__setattr__(self, "_spline", CubicHermiteSpline(self.grid, values, derivs, axis=0))

    @property
    def T(self) -> float:
        return self.params.T

    def coefficients(self, t):
        """``(K, L, chi, Q)`` at time(s) ``t`` by cubic Hermite interpolation."""
        t = np.asarray(t, dtype=float)
        if np.any(t < -1e-12) or np.any(t > self.T + 1e-12):
            raise ValueError(f"t must lie in [0, {self.T}]")
        vals = self._spline(np.clip(t, 0.0, self.T))
        return vals[..., 0], vals[..., 1], vals[..., 2], vals[..., 3]

    def c_N(self, t, N: int):
        _, _, chi, Q = self.coefficients(t)
        return chi + self.params.sigma**2 * Q / N


def solve_riccati(params: LqParams, grid_size: int = 1024, *, corrupt_q_sign: bool = False) -> RiccatiSolution:
    """Backward RK4 on ``grid_size`` uniform steps.

    ``corrupt_q_sign`` flips the sign of ``q`` inside the ODE only (negative
    control for the residual gates); evaluations still refer to ``params``.
    """
    if grid_size < MIN_GRID:
        raise ValueError(f"grid_size must be >= {MIN_GRID}")
    ode = replace(params, q=-params.q) if corrupt_q_sign else params
    h = params.T / grid_size
    grid = np.linspace(0.0, params.T, grid_size + 1)
    out = np.empty((grid_size + 1, 4))
    y = np.array([params.g, params.gbar, 0.0, 0.0])
    out[grid_size] = y
    for k in range(grid_size, 0, -1):
        # backward in time: dy/ds = -F(y), s = T - t
        k1 = -_rhs(y, ode)
        k2 = -_rhs(y + 0.5 * h * k1, ode)
        k3 = -_rhs(y + 0.5 * h * k2, ode)
        k4 = -_rhs(y + h * k3, ode)
        y = y + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        if not np.all(np.isfinite(y)) or abs(y[0]) > BLOWUP or abs(y[1]) > BLOWUP:
            raise HorizonTooLongError(
                f"Riccati solution blows up at t = {grid[k - 1]:.6g}; shorten the horizon", time=float(grid[k - 1])
            )
        out[k - 1] = y
    return RiccatiSolution(params, grid, out[:, 0], out[:, 1], out[:, 2], out[:, 3], ode)


def _points(mu) -> np.ndarray:
    if isinstance(mu, EmpiricalMeasure):
        return mu.points
    pts = np.asarray(mu, dtype=float)
    return pts[:, None] if pts.ndim == 1 else pts


def _sq(v: np.ndarray) -> np.ndarray:
    return np.sum(v * v, axis=-1)


def eval_v(sol: RiccatiSolution, t, mu):
    K, L, chi, _ = sol.coefficients(t)
    pts = _points(mu)
    return K * cloud_m2(pts) + L * _sq(cloud_mean(pts)) + chi


def eval_dmu_v(sol: RiccatiSolution, t, mu, x):
    """``d_mu v(t, mu)(x) = 2 K x + 2 L mean(mu)``; ``x`` of shape (..., M, d)."""
    K, L, _, _ = sol.coefficients(t)
    pts = _points(mu)
    x = np.asarray(x, dtype=float)
    K = np.asarray(K)[..., None, None]
    L = np.asarray(L)[..., None, None]
    return 2 * K * x + 2 * L * cloud_mean(pts)[..., None, :]


def eval_d2mu_v(sol: RiccatiSolution, t):
    """``d2_mu v(t, mu)(x, x') = 2 L(t)`` (constant in mu, x, x')."""
    return 2 * sol.coefficients(t)[1]


def eval_vN(sol: RiccatiSolution, t, xs, N: Optional[int] = None):
    pts = _points(xs)
    N = pts.shape[-2] if N is None else N
    K, L, chi, Q = sol.coefficients(t)
    return K * cloud_m2(pts) + L * _sq(cloud_mean(pts)) + chi + sol.params.sigma**2 * Q / N


def eval_grad_vN(sol: RiccatiSolution, t, xs, i: Optional[int] = None, N: Optional[int] = None):
    """``D_{x_i} vN = (2 K x_i + 2 L xbar) / N`` for particle ``i`` or all particles."""
    pts = _points(xs)
    N = pts.shape[-2] if N is None else N
    g = eval_dmu_v(sol, t, pts, pts) / N
    return g if i is None else g[..., i, :]


def analytic_solution(sol: RiccatiSolution) -> AnalyticSolution:
    d = 1
    eye = np.eye(d)

    def v(t, mu):
        return eval_v(sol, t, mu)

    def dmu_v(t, mu, x):
        return eval_dmu_v(sol, t, mu, x)

    # t is a scalar time for the two matrix-valued derivatives
    def dx_dmu_v(t, mu, x):
        K = float(sol.coefficients(t)[0])
        return np.broadcast_to(2 * K * eye, np.shape(x)[:-1] + (d, d))

    def d2mu_v(t, mu, x, xp):
        shape = np.broadcast_shapes(np.shape(x)[:-1], np.shape(xp)[:-1])
        return np.broadcast_to(float(eval_d2mu_v(sol, t)) * eye, shape + (d, d))

    def vN(t, xs):
        return eval_vN(sol, t, xs)

    def grad_vN(t, xs):
        return eval_grad_vN(sol, t, xs)

    def v_law(t, mean, cov):
        K, L, chi, _ = sol.coefficients(t)
        mean = np.asarray(mean, dtype=float)
        return K * (np.trace(cov, axis1=-2, axis2=-1) + _sq(mean)) + L * _sq(mean) + chi

    def dmu_v_law(t, mean, cov, x):
        K, L, _, _ = sol.coefficients(t)
        return 2 * K * np.asarray(x) + 2 * L * np.asarray(mean)[..., None, :]

    return AnalyticSolution(v=v, dmu_v=dmu_v, dx_dmu_v=dx_dmu_v, d2mu_v=d2mu_v, vN=vN,
                            grad_vN=grad_vN, v_law=v_law, dmu_v_law=dmu_v_law)


def lq_problem(params: LqParams, grid_size: int = 1024, *, corrupt_q_sign: bool = False):
    """``(ModelSpec, RiccatiSolution, AnalyticSolution)`` for one LQ instance."""
    sol = solve_riccati(params, grid_size, corrupt_q_sign=corrupt_q_sign)
    return lq_model(params), sol, analytic_solution(sol)


# ------------------------------------------------------------------ residuals


def master_residual(spec: ModelSpec, an: AnalyticSolution, t: float, points, h: float = 1e-4) -> float:
    """|d_t v + int H dmu + trace terms| of the measure PDE at an empirical measure."""
    pts = _points(points)
    n_atoms = pts.shape[0]
    dt_v = (an.v(t + h, pts) - an.v(t - h, pts)) / (2 * h)
    y = an.v(t, pts)
    z = an.dmu_v(t, pts, pts)
    mu = pts
    ham = np.mean(spec.driver_H(t, pts, mu, y, z))
    sig = spec.vol_sigma(t, pts, mu)
    sig0 = spec.vol_sigma0(t, pts, mu)
    cov = sig @ np.swapaxes(sig, -1, -2) + sig0 @ np.swapaxes(sig0, -1, -2)
    gamma = an.dx_dmu_v(t, mu, pts)
    local = 0.5 * np.mean(np.trace(cov @ gamma, axis1=-2, axis2=-1))
    xi = np.repeat(pts, n_atoms, axis=0)
    xj = np.tile(pts, (n_atoms, 1))
    s0i = np.repeat(sig0, n_atoms, axis=0)
    s0j = np.tile(sig0, (n_atoms, 1, 1))
    gamma0 = an.d2mu_v(t, mu, xi, xj)
    common = 0.5 * np.mean(np.trace(s0i @ np.swapaxes(s0j, -1, -2) @ gamma0, axis1=-2, axis2=-1))
    return float(abs(dt_v + ham + local + common))


def finite_dim_residual(spec: ModelSpec, vN, t: float, xs, h_t: float = 1e-4, h_x: float = 1e-3) -> float:
    """|d_t vN + (1/N) sum H(x_i, mubar, vN, N D_i vN) + tr(Sigma_N D^2 vN)/2| by finite differences."""
    xs = _points(xs)
    N, d = xs.shape
    flat = xs.reshape(-1)
    nd = flat.size

    def f(vec):
        return float(vN(t, vec.reshape(N, d)))

    dt_v = (float(vN(t + h_t, xs)) - float(vN(t - h_t, xs))) / (2 * h_t)
    grad = np.empty(nd)
    hess = np.empty((nd, nd))
    eye = np.eye(nd) * h_x
    for p in range(nd):
        grad[p] = (f(flat + eye[p]) - f(flat - eye[p])) / (2 * h_x)
        for q in range(p, nd):
            hess[p, q] = (f(flat + eye[p] + eye[q]) - f(flat + eye[p] - eye[q])
                          - f(flat - eye[p] + eye[q]) + f(flat - eye[p] - eye[q])) / (4 * h_x * h_x)
            hess[q, p] = hess[p, q]
    y = float(vN(t, xs))
    z = N * grad.reshape(N, d)
    ham = np.mean(spec.driver_H(t, xs, xs, y, z))
    sig = spec.vol_sigma(t, xs, xs)
    sig0 = spec.vol_sigma0(t, xs, xs)
    big = np.zeros((nd, nd))
    for i in range(N):
        for j in range(N):
            block = sig0[i] @ sig0[j].T
            if i == j:
                block = block + sig[i] @ sig[i].T
            big[i * d:(i + 1) * d, j * d:(j + 1) * d] = block
    return float(abs(dt_v + ham + 0.5 * np.trace(big @ hess)))


def pde_residual(sol: RiccatiSolution, t: float, mu) -> float:
    """Measure-PDE residual of the assembled ``v`` (true model data, not the ODE data)."""
    return master_residual(lq_model(sol.params), analytic_solution(sol), t, mu)


def vN_residual(sol: RiccatiSolution, t: float, xs) -> float:
    return finite_dim_residual(lq_model(sol.params), analytic_solution(sol).vN, t, xs)


def write_riccati_csv(sol: RiccatiSolution, path, N_values: Iterable[int]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["N", "t", "K", "L", "chi", "c_N"])
        for N in N_values:
            cN = sol.chi + sol.params.sigma**2 * sol.Q / N
            for row in zip(sol.grid, sol.K, sol.L, sol.chi, cN):
                w.writerow([N] + [repr(float(v)) for v in row])
