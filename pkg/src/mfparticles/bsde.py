"""Backward solvers for the N-particle BSDE.

``evaluate_analytic`` reads ``Y = vN`` and ``Z^i = D_{x_i} vN`` off a known
solution. ``solve_lsmc`` is a least-squares Monte Carlo theta-scheme: at each
step the target ``Y_{k+1} + (1 - theta) dt f_{k+1}`` is regressed jointly on

* symmetric statistics of the cloud (the conditional-expectation part),
* martingale features ``sum_i psi_c(x_i, xbar) (sigma_i dW^i)_a`` whose
  coefficients give ``Z^i_a = sum_c beta_ac psi_c(x_i, xbar)``,
* common-noise features ``phi(x) dW0`` and ``dW0 dW0^T - dt``.

Putting the martingale part in the same regression removes its variance from
the conditional-expectation estimate instead of leaving it in the residual.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .empirical import cloud_m2, cloud_mean, sym_mean
from .errors import BasisDegeneracyError, UnsupportedModelError
from .model import AnalyticSolution, ModelSpec
from .sim import ParticlePaths

Y_TERMS = ("1", "xbar", "m2", "xbar2", "xbar_m2", "m2_2")
Z_TERMS = ("1", "x", "xbar")
COMMON_TERMS = ("1", "xbar", "m2")
INSTABILITY_FACTOR = 1e3


@dataclass
class BackwardSolution:
    times: np.ndarray
    Y: np.ndarray   # (K+1, P)
    Z: np.ndarray   # (K+1, P, N, d)
    method: str
    diagnostics: dict = field(default_factory=dict)


@dataclass(frozen=True)
class BasisSpec:
    """Regression design of ``solve_lsmc``.

    ``y_terms`` is a subset of ``{1, xbar, m2, xbar2, xbar_m2, m2_2}`` (xbar2 means
    all products xbar_a xbar_b); ``z_terms`` of ``{1, x, xbar}``; ``common_terms``
    of ``{1, xbar, m2}``. ``theta`` in [1/2, 1] weights the driver at t_k
    (1 is the explicit-in-Y_{k+1} scheme, 1/2 the trapezoidal one).
    """

    y_terms: tuple = ("1", "xbar", "xbar2", "m2")
    z_terms: tuple = Z_TERMS
    common_terms: tuple = COMMON_TERMS
    common_second_order: bool = True
    theta: float = 0.5
    ridge: float = 1e-10
    max_condition: float = 1e12
    fd_step: float = 1e-5

    def __post_init__(self):
        for name, terms, allowed in (("y_terms", self.y_terms, Y_TERMS), ("z_terms", self.z_terms, Z_TERMS),
                                     ("common_terms", self.common_terms, COMMON_TERMS)):
            bad = set(terms) - set(allowed)
            if bad:
                raise ValueError(f"unknown {name}: {sorted(bad)}")
        if "1" not in self.y_terms:
            raise ValueError("y_terms must contain the constant '1'")
        if not 0.5 <= self.theta <= 1.0:
            raise ValueError("theta must lie in [0.5, 1]")

    def size(self, d: int, m: int) -> int:
        ny = _y_features(np.zeros((1, 1, d)), self.y_terms).shape[-1]
        nz = d * _psi(np.zeros((1, 1, d)), self.z_terms).shape[-1]
        nc = m * _common_phi(np.zeros((1, 1, d)), self.common_terms).shape[-1]
        if self.common_second_order:
            nc += m * (m + 1) // 2
        return ny + nz + nc


# ------------------------------------------------------------------- features


def _y_features(x: np.ndarray, terms) -> np.ndarray:
    """Symmetric statistics of ``(P, N, d)`` clouds -> ``(P, q)``."""
    P, _, d = x.shape
    xbar = cloud_mean(x)
    m2 = cloud_m2(x)
    cols = []
    for term in terms:
        if term == "1":
            cols.append(np.ones((P, 1)))
        elif term == "xbar":
            cols.append(xbar)
        elif term == "m2":
            cols.append(m2[:, None])
        elif term == "xbar2":
            a, b = np.triu_indices(d)
            cols.append(xbar[:, a] * xbar[:, b])
        elif term == "xbar_m2":
            cols.append(xbar * m2[:, None])
        elif term == "m2_2":
            cols.append((m2 * m2)[:, None])
    return np.concatenate(cols, axis=1)


def _psi(x: np.ndarray, terms) -> np.ndarray:
    """Per-particle Z basis ``(P, N, c)``."""
    P, N, d = x.shape
    xbar = np.broadcast_to(cloud_mean(x)[:, None, :], x.shape)
    cols = []
    for term in terms:
        if term == "1":
            cols.append(np.ones((P, N, 1)))
        elif term == "x":
            cols.append(x)
        elif term == "xbar":
            cols.append(xbar)
    return np.concatenate(cols, axis=2)


def _common_phi(x: np.ndarray, terms) -> np.ndarray:
    return _y_features(x, terms)


def _lstsq(A: np.ndarray, target: np.ndarray, ridge: float, max_cond: float, step: int):
    """Ridge-regularised normal equations on RMS-scaled columns."""
    scale = np.sqrt(np.einsum("pj,pj->j", A, A) / A.shape[0])
    scale[scale == 0.0] = 1.0
    As = A / scale
    gram = np.einsum("pi,pj->ij", As, As)
    cond = float(np.linalg.cond(gram))
    if not np.isfinite(cond) or cond > max_cond:
        raise BasisDegeneracyError(
            f"normal equations ill-conditioned at step {step} (condition {cond:.3g})", step=step, condition=cond
        )
    gram = gram + ridge * np.trace(gram) * np.eye(gram.shape[0])
    rhs = np.einsum("pi,p...->i...", As, target)
    coef = np.linalg.solve(gram, rhs.reshape(gram.shape[0], -1)).reshape(rhs.shape)
    coef = coef / scale.reshape((-1,) + (1,) * (coef.ndim - 1))
    return coef, cond


def _driver_mean(spec: ModelSpec, t: float, x: np.ndarray, y: np.ndarray, Z: np.ndarray) -> np.ndarray:
    """``(1/N) sum_i H_b(t, x_i, mubar, y, N Z^i)`` per path."""
    N = x.shape[1]
    vals = spec.driver_Hb(t, x, x, y[:, None], N * Z)
    return sym_mean(np.asarray(vals, dtype=float), axis=-1)


def terminal_gradient(spec: ModelSpec, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite-difference ``D_{x_i} G(mubar(x))`` for ``(P, N, d)`` clouds."""
    P, N, d = x.shape
    grad = np.empty_like(x)
    for i in range(N):
        for a in range(d):
            up = x.copy()
            dn = x.copy()
            up[:, i, a] += h
            dn[:, i, a] -= h
            grad[:, i, a] = (spec.terminal_G(up) - spec.terminal_G(dn)) / (2 * h)
    return grad


# -------------------------------------------------------------------- solvers


def evaluate_analytic(an: AnalyticSolution, paths: ParticlePaths, spec: Optional[ModelSpec] = None) -> BackwardSolution:
    """``Y_k = vN(t_k, X_k)`` and ``Z^i_k = D_{x_i} vN(t_k, X_k)`` along stored paths.

    When ``spec`` is given the terminal value is taken from ``G`` itself so that
    both back-ends share ``Y_K`` bitwise; the gap to ``vN(T, .)`` is recorded.
    """
    if an.vN is None or an.grad_vN is None:
        raise UnsupportedModelError("analytic back-end needs vN and grad_vN")
    K = paths.K
    Y = np.empty((K + 1, paths.P))
    Z = np.empty(paths.states.shape)
    for k, t in enumerate(paths.times):
        Y[k] = an.vN(float(t), paths.states[k])
        Z[k] = an.grad_vN(float(t), paths.states[k])
    diag = {}
    if spec is not None:
        G = np.asarray(spec.terminal_G(paths.states[K]), dtype=float)
        diag["terminal_gap"] = float(np.max(np.abs(G - Y[K])))
        Y[K] = G
    return BackwardSolution(paths.times, Y, Z, "analytic", diag)


def solve_lsmc(spec: ModelSpec, paths: ParticlePaths, basis: BasisSpec = BasisSpec()) -> BackwardSolution:
    """Regression-based backward recursion over a batch of ``P`` particle paths.

    Per step (theta = ``basis.theta``):

    * ``T = Y_{k+1} + (1 - theta) dt f_{k+1}`` with ``f = (1/N) sum_i H_b(., N Z^i)``,
    * ``T ~ phi(X_k) beta_Y + sum_{a,c} beta_ac F_ac + common block`` (joint fit),
    * ``Z_k = (Z_reg - (1 - theta) E_k[Z_{k+1}]) / theta``,
    * ``Y_k = phi(X_k) beta_Y + theta dt f(t_k, X_k, Y_k, Z_k)`` by Picard iteration
      started at the regression value (second pass when the first moves Y by
      more than 1e-8 relative).
    """
    states, times = paths.states, paths.times
    K, P, N, d = paths.K, paths.P, paths.N, spec.d
    m = spec.m
    p_total = basis.size(d, m)
    if P < 10 * p_total:
        raise ValueError(f"P = {P} paths is below 10 x basis size ({p_total})")
    theta = basis.theta
    Y = np.empty((K + 1, P))
    Z = np.empty((K + 1, P, N, d))
    XK = states[K]
    Y[K] = spec.terminal_G(XK)
    Z[K] = terminal_gradient(spec, XK, basis.fd_step)
    f_next = _driver_mean(spec, float(times[K]), XK, Y[K], Z[K])

    conds, resid_var, picard, gamma0 = [], [], [], []
    unstable = []
    for k in range(K - 1, -1, -1):
        t = float(times[k])
        dt = float(times[k + 1] - times[k])
        x = states[k]
        target = Y[k + 1] + (1.0 - theta) * dt * f_next

        phi = _y_features(x, basis.y_terms)
        psi = _psi(x, basis.z_terms)                               # (P, N, c)
        sig = spec.vol_sigma(t, x, x)                              # (P, N, d, n)
        noise = (sig @ paths.dW[k][..., None])[..., 0]             # (P, N, d)
        mart = np.einsum("pia,pic->pac", noise, psi).reshape(P, -1)
        dW0 = paths.dW0[k]
        common = (_common_phi(x, basis.common_terms)[:, :, None] * dW0[:, None, :]).reshape(P, -1)
        blocks = [phi, mart, common]
        if basis.common_second_order:
            a, b = np.triu_indices(m)
            blocks.append(dW0[:, a] * dW0[:, b] - dt * (a == b))
        A = np.concatenate(blocks, axis=1)
        coef, cond = _lstsq(A, target, basis.ridge, basis.max_condition, k)
        conds.append(cond)
        ny, nm = phi.shape[1], mart.shape[1]
        cond_exp = phi @ coef[:ny]
        resid_var.append(float(np.var(target - A @ coef)))
        beta = coef[ny:ny + nm].reshape(d, psi.shape[-1])
        z_reg = np.einsum("pic,ac->pia", psi, beta)
        gamma0.append(coef[ny + nm:ny + nm + common.shape[1]])

        if theta < 1.0:
            flat_psi = psi.reshape(P * N, -1)
            zc, c2 = _lstsq(flat_psi, Z[k + 1].reshape(P * N, d), basis.ridge, basis.max_condition, k)
            z_prev = (flat_psi @ zc).reshape(P, N, d)
            Zk = (z_reg - (1.0 - theta) * z_prev) / theta
        else:
            Zk = z_reg
        Z[k] = Zk

        y_pred = cond_exp
        passes = 0
        for _ in range(2):
            y_new = cond_exp + theta * dt * _driver_mean(spec, t, x, y_pred, Zk)
            passes += 1
            change = np.max(np.abs(y_new - y_pred)) / max(float(np.max(np.abs(y_pred))), 1e-300)
            y_pred = y_new
            if change <= 1e-8:
                break
        # driver at the accepted (Y_k, Z_k) is f_{k+1} of the next (earlier) step
        f_next = _driver_mean(spec, t, x, y_pred, Zk)
        Y[k] = y_pred
        picard.append(passes)

        bound = INSTABILITY_FACTOR * (1.0 + np.linalg.norm(x, axis=-1))
        if np.any(np.linalg.norm(N * Zk, axis=-1) > bound):
            unstable.append(k)

    if unstable:
        warnings.warn(f"LSMC: N Z exceeds {INSTABILITY_FACTOR:g}(1+|x|) at {len(unstable)} steps", RuntimeWarning)
    diag = {
        "basis_size": p_total,
        "theta": theta,
        "condition": conds[::-1],
        "residual_variance": resid_var[::-1],
        "picard_passes": picard[::-1],
        "common_integrand": [g.tolist() for g in gamma0[::-1]],
        "unstable_steps": sorted(unstable),
    }
    return BackwardSolution(times, Y, Z, "lsmc", diag)


# ----------------------------------------------------------- correction term


@dataclass(frozen=True)
class CorrectionSeries:
    """``(1/2N^2) sum_i tr(S_i d2mu_v(t, mubar)(x_i, x_i))`` per time and path.

    ``idio`` uses ``S = sigma sigma^T``; ``full`` uses ``sigma sigma^T + sigma0 sigma0^T``.
    ``*_int`` are trapezoid integrals over [0, T] (per path).
    """

    times: np.ndarray
    idio: np.ndarray   # (K+1, P)
    full: np.ndarray
    idio_int: np.ndarray
    full_int: np.ndarray


def correction_term(spec: ModelSpec, an: AnalyticSolution, paths: ParticlePaths) -> CorrectionSeries:
    N = paths.N
    K = paths.K
    idio = np.empty((K + 1, paths.P))
    full = np.empty((K + 1, paths.P))
    for k, t in enumerate(paths.times):
        x = paths.states[k]
        t = float(t)
        sig = spec.vol_sigma(t, x, x)
        sig0 = spec.vol_sigma0(t, x, x)
        s_idio = sig @ np.swapaxes(sig, -1, -2)
        s_full = s_idio + sig0 @ np.swapaxes(sig0, -1, -2)
        hess = an.d2mu_v(t, x, x, x)                              # (P, N, d, d)
        idio[k] = sym_mean(np.trace(s_idio @ hess, axis1=-2, axis2=-1), axis=-1) / (2.0 * N)
        full[k] = sym_mean(np.trace(s_full @ hess, axis1=-2, axis2=-1), axis=-1) / (2.0 * N)
    return CorrectionSeries(
        paths.times, idio, full,
        np.trapezoid(idio, paths.times, axis=0), np.trapezoid(full, paths.times, axis=0),
    )


def write_bsde_csv(back: BackwardSolution, path, max_paths: Optional[int] = None) -> None:
    """Columns ``k, t, path, Y, Z_mean_abs, Z_max_abs`` (summaries of |Z^i| over particles)."""
    P = back.Y.shape[1] if max_paths is None else min(max_paths, back.Y.shape[1])
    norms = np.linalg.norm(back.Z[:, :P], axis=-1)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["k", "t", "path", "Y", "Z_mean_abs", "Z_max_abs"])
        for k, t in enumerate(back.times):
            for p in range(P):
                w.writerow([k, repr(float(t)), p, repr(float(back.Y[k, p])),
                            repr(float(norms[k, p].mean())), repr(float(norms[k, p].max()))])
