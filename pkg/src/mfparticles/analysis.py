"""Error functionals, lifted-derivative checks and log-log rate fits."""

from __future__ import annotations

import math
import warnings
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from .bsde import BackwardSolution
from .errors import NoFitError
from .model import AnalyticSolution
from .sim import LimitPaths, ParticlePaths

NAN = float("nan")


@dataclass
class ErrorReport:
    N: int
    seed: int
    method: str
    err_y_sup: float
    err_z_int: float
    err_y_weak: float = NAN
    err_z_weak: float = NAN
    chaos_y: float = NAN
    chaos_z: float = NAN
    corr_term_int: float = NAN
    stderr: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def _check_grid(back: BackwardSolution, paths: ParticlePaths) -> None:
    if back.times.shape != paths.times.shape or not np.array_equal(back.times, paths.times):
        raise ValueError("backward solution and particle paths are on different time grids")
    if back.Y.shape[1] != paths.P or back.Z.shape[1:] != paths.states.shape[1:]:
        raise ValueError("backward solution and particle paths have different batch shapes")


def pathwise_errors(back: BackwardSolution, an: AnalyticSolution, paths: ParticlePaths):
    """Per-path ``sup_k |Y_k - v(t_k, mubar_k)|`` and ``(1/N) sum_i int |N Z^i - d_mu v(x_i)|^2 dt``."""
    _check_grid(back, paths)
    N = paths.N
    K = paths.K
    gap_y = np.empty((K + 1, paths.P))
    gap_z = np.empty((K + 1, paths.P))
    for k, t in enumerate(paths.times):
        x = paths.states[k]
        t = float(t)
        gap_y[k] = np.abs(back.Y[k] - an.v(t, x))
        diff = N * back.Z[k] - an.dmu_v(t, x, x)
        gap_z[k] = np.mean(np.sum(diff * diff, axis=-1), axis=-1)
    return gap_y.max(axis=0), np.trapezoid(gap_z, paths.times, axis=0)


@dataclass
class WeakErrors:
    err_y_weak: float
    err_z_weak: float
    chaos_y: float
    chaos_z: float
    se_y_weak: float
    se_z_weak: float
    se_chaos_y: float
    se_chaos_z: float
    mean_pathwise_y: float
    mean_pathwise_z: float
    se_pathwise_y: float
    decomposition_y: bool
    decomposition_z: bool
    n_samples: int


def _trapezoid_weights(times: np.ndarray) -> np.ndarray:
    w = np.zeros_like(times)
    gaps = np.diff(times)
    w[:-1] += 0.5 * gaps
    w[1:] += 0.5 * gaps
    return w


def _as_list(obj):
    return list(obj) if isinstance(obj, (list, tuple)) else [obj]


def _limit_refs(an: AnalyticSolution, lim: LimitPaths, k: int, t: float):
    """``v(t, P0_{X_t})`` per path and ``d_mu v(t, P0_{X_t})(X^i_t)`` on the limit copies."""
    x = lim.states[k]
    if an.v_law is not None and an.dmu_v_law is not None:
        mean, cov = lim.cond_mean[k], lim.cond_cov[k]
        return an.v_law(t, mean, cov), an.dmu_v_law(t, mean, cov, x)
    return an.v(t, x), an.dmu_v(t, x, x)


def weak_and_chaos_errors(backs, an: AnalyticSolution, paths, limits=None) -> WeakErrors:
    """Monte Carlo estimates of the weak errors and the propagation-of-chaos errors.

    ``backs``, ``paths`` and ``limits`` are single objects or equal-length
    sequences of batches (e.g. one per seed); expectations are pooled over all
    realisations. The limit copies must share W0 (and, for the paired Z terms,
    the idiosyncratic noise) with the particle paths. Standard errors of the Y
    quantities are taken at the maximising time; for the Z quantities they use
    the delta method with time/particle correlations ignored. Without limit
    paths every entry is NaN (unavailable).
    """
    backs, paths = _as_list(backs), _as_list(paths)
    if len(backs) != len(paths):
        raise ValueError("need one backward solution per path batch")
    path_y, path_z = [], []
    for b, p in zip(backs, paths):
        ey, ez = pathwise_errors(b, an, p)
        path_y.append(ey)
        path_z.append(ez)
    path_y = np.concatenate(path_y)
    path_z = np.concatenate(path_z)
    total = path_y.size
    mean_y = float(path_y.mean())
    se_path = float(path_y.std(ddof=1) / math.sqrt(total)) if total > 1 else 0.0
    if limits is None:
        return WeakErrors(NAN, NAN, NAN, NAN, NAN, NAN, NAN, NAN, mean_y, float(path_z.mean()), se_path,
                          False, False, total)
    limits = _as_list(limits)
    if len(limits) != len(paths):
        raise ValueError("need one LimitPaths per path batch")

    p0 = paths[0]
    K, N, times = p0.K, p0.N, p0.times
    # running sums over realisations: first and second moments of the paired differences
    s_wy = np.zeros(K + 1)
    q_wy = np.zeros(K + 1)
    s_cy = np.zeros(K + 1)
    q_cy = np.zeros(K + 1)
    s_wz = np.zeros((K + 1, N, p0.states.shape[-1]))
    q_wz = np.zeros_like(s_wz)
    s_cz = np.zeros_like(s_wz)
    q_cz = np.zeros_like(s_wz)
    for b, p, lim in zip(backs, paths, limits):
        if p.N != N or not np.array_equal(p.times, times) or not np.array_equal(lim.times, times):
            raise ValueError("all batches must share N and the time grid")
        paired = lim.states.shape[2] == N
        for k, t in enumerate(times):
            t = float(t)
            x = p.states[k]
            v_law, dv_law = _limit_refs(an, lim, k, t)
            if not paired:
                dv_law = np.broadcast_to(dv_law.mean(axis=1, keepdims=True), x.shape)
            dy = b.Y[k] - v_law
            cy = an.v(t, x) - v_law
            dz = N * b.Z[k] - dv_law
            cz = an.dmu_v(t, x, x) - dv_law
            s_wy[k] += dy.sum()
            q_wy[k] += (dy * dy).sum()
            s_cy[k] += cy.sum()
            q_cy[k] += (cy * cy).sum()
            s_wz[k] += dz.sum(axis=0)
            q_wz[k] += (dz * dz).sum(axis=0)
            s_cz[k] += cz.sum(axis=0)
            q_cz[k] += (cz * cz).sum(axis=0)

    def sup_and_se(s, q):
        mean = s / total
        var = np.maximum(q / total - mean * mean, 0.0) * total / max(total - 1, 1)
        k = int(np.argmax(np.abs(mean)))
        return float(abs(mean[k])), float(math.sqrt(var[k] / total))

    def int_and_se(s, q):
        mean = s / total
        var = np.maximum(q / total - mean * mean, 0.0) * total / max(total - 1, 1)
        sq = np.sum(mean * mean, axis=-1).mean(axis=-1)           # (K+1,)
        value = float(np.trapezoid(sq, times))
        w = _trapezoid_weights(times)
        grad = 2.0 * mean * (w[:, None, None] / N)
        return value, float(math.sqrt(np.sum(grad * grad * var / total)))

    wy, se_wy = sup_and_se(s_wy, q_wy)
    cy, se_cy = sup_and_se(s_cy, q_cy)
    wz, se_wz = int_and_se(s_wz, q_wz)
    cz, se_cz = int_and_se(s_cz, q_cz)
    mean_z = float(path_z.mean())
    se_dec = math.sqrt(se_wy**2 + se_cy**2 + se_path**2)
    return WeakErrors(
        err_y_weak=wy, err_z_weak=wz, chaos_y=cy, chaos_z=cz,
        se_y_weak=se_wy, se_z_weak=se_wz, se_chaos_y=se_cy, se_chaos_z=se_cz,
        mean_pathwise_y=mean_y, mean_pathwise_z=mean_z, se_pathwise_y=se_path,
        decomposition_y=bool(wy <= mean_y + cy + 3 * se_dec),
        decomposition_z=bool(wz <= 2 * (mean_z + cz) + 3 * math.sqrt(se_wz**2 + 4 * se_cz**2)),
        n_samples=total,
    )


def lift_derivative_check(an: AnalyticSolution, t: float, xs, i: int, h: float) -> float:
    """Max over components of ``|dv(t, mubar(x))/dx_i (central) - (1/N) d_mu v(t, mubar(x))(x_i)|``."""
    if not h > 0:
        raise ValueError("h must be > 0")
    xs = np.asarray(xs, dtype=float)
    if xs.ndim == 1:
        xs = xs[:, None]
    N, d = xs.shape
    exact = an.dmu_v(t, xs, xs[i:i + 1])[0] / N
    worst = 0.0
    for a in range(d):
        up = xs.copy()
        dn = xs.copy()
        up[i, a] += h
        dn[i, a] -= h
        fd = (float(an.v(t, up)) - float(an.v(t, dn))) / (2 * h)
        worst = max(worst, abs(fd - float(exact[a])))
    return worst


@dataclass(frozen=True)
class RateFit:
    slope: float
    intercept: float
    r2: float
    n_points: int

    def to_dict(self) -> dict:
        return asdict(self)


def fit_rate(points: Sequence) -> RateFit:
    """Least squares of ``log error`` on ``log N``; non-positive errors are dropped with a warning."""
    pts = [(float(n), float(e)) for n, e in points]
    kept = [(n, e) for n, e in pts if e > 0 and math.isfinite(e) and n > 0]
    if len(kept) < len(pts):
        warnings.warn(f"fit_rate: excluded {len(pts) - len(kept)} non-positive or non-finite errors", RuntimeWarning)
    if len(kept) < 3:
        raise NoFitError(f"need at least 3 positive errors, have {len(kept)}")
    x = np.log([n for n, _ in kept])
    y = np.log([e for _, e in kept])
    xc = x - x.mean()
    yc = y - y.mean()
    slope = float(np.dot(xc, yc) / np.dot(xc, xc))
    intercept = float(y.mean() - slope * x.mean())
    ss_tot = float(np.dot(yc, yc))
    resid = yc - slope * xc
    ss_res = float(np.dot(resid, resid))
    r2 = 1.0 if ss_tot == 0.0 else 1.0 - ss_res / ss_tot
    return RateFit(slope, intercept, r2, len(kept))
