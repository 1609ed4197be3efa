"""Problem instances: coefficients, drivers, terminal costs and initial laws.

All model callables are vectorised over leading batch axes:

* ``x`` has shape ``(..., M, d)`` (evaluation points, usually the particles),
* ``mu`` has shape ``(..., N, d)`` (atoms of the empirical measure),
* ``y`` broadcasts against ``(..., M)`` and ``z`` has shape ``(..., M, d)``.

``drift_b`` returns ``(..., M, d)``, ``vol_sigma`` ``(..., M, d, n)``,
``vol_sigma0`` ``(..., M, d, m)``, the drivers ``(..., M)`` and
``terminal_G(mu)`` returns ``(...)``. The initial law is given as a push-forward
of standard normals, ``mu0_sampler(z)`` with ``z`` of shape ``(..., d)``, so that
every initial atom is keyed by the counter RNG.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Callable, Optional

import numpy as np

from .empirical import EmpiricalMeasure, cloud_m2, cloud_mean, wasserstein2
from .errors import EvaluationError, InvertibilityError

PROBE_X_SCALE = 3.0
PROBE_ATOMS = 16
SCAN_POINTS = 1001


@dataclass(frozen=True)
class AffineStructure:
    """Drift ``b0 + b1 x + b2 mean(mu)``, constant volatilities, Gaussian mu0.

    Under this structure the conditional law of the McKean-Vlasov limit given
    the common noise stays Gaussian and is tracked by (mean, covariance).
    """

    b0: np.ndarray
    b1: np.ndarray
    b2: np.ndarray
    sigma: np.ndarray
    sigma0: np.ndarray
    mu0_mean: np.ndarray
    mu0_cov: np.ndarray


@dataclass(frozen=True)
class ModelSpec:
    d: int
    n: int
    m: int
    drift_b: Callable
    vol_sigma: Callable
    vol_sigma0: Callable
    driver_H: Callable
    terminal_G: Callable
    mu0_sampler: Callable
    horizon_T: float
    driver_Hb: Optional[Callable] = None
    name: str = "custom"
    affine: Optional[AffineStructure] = None
    params: dict = field(default_factory=dict)
    # (beta, f) of a control problem, when the driver came from build_control_driver
    control: Optional[tuple] = None

    def __post_init__(self):
        if min(self.d, self.n, self.m) < 1:
            raise ValueError("dimensions d, n, m must be positive")
        if not self.horizon_T > 0:
            raise ValueError("horizon_T must be > 0")
        if self.driver_Hb is None:
            H, b = self.driver_H, self.drift_b

            def driver_Hb(t, x, mu, y, z):
                return H(t, x, mu, y, z) - np.sum(b(t, x, mu) * z, axis=-1)

            object.__setattr__(self, "driver_Hb", driver_Hb)


@dataclass(frozen=True)
class AnalyticSolution:
    """Closed-form solution of the measure PDE and of its N-particle version.

    ``v(t, mu) -> (...)``; ``dmu_v(t, mu, x) -> (..., M, d)``;
    ``dx_dmu_v(t, mu, x) -> (..., M, d, d)``; ``d2mu_v(t, mu, x, xp) -> (..., M, d, d)``
    (evaluated on the pairs ``(x[j], xp[j])``); ``vN(t, xs) -> (...)``;
    ``grad_vN(t, xs) -> (..., N, d)``. ``v_law``/``dmu_v_law`` evaluate at a
    Gaussian law given by (mean, covariance) and are optional.
    """

    v: Callable
    dmu_v: Callable
    dx_dmu_v: Callable
    d2mu_v: Callable
    vN: Optional[Callable] = None
    grad_vN: Optional[Callable] = None
    v_law: Optional[Callable] = None
    dmu_v_law: Optional[Callable] = None

    def growth_constant(self, t_values, clouds) -> float:
        """Smallest L with |dmu_v| <= L(1+|x|+||mu||_2) and |d2mu_v(x,x)| <= L on the samples."""
        worst = 0.0
        for t in t_values:
            for pts in clouds:
                g = np.linalg.norm(self.dmu_v(t, pts, pts), axis=-1)
                norm2 = np.sqrt(cloud_m2(pts))
                worst = max(worst, float(np.max(g / (1 + np.linalg.norm(pts, axis=-1) + norm2))))
                h = np.linalg.norm(self.d2mu_v(t, pts, pts, pts), axis=(-2, -1))
                worst = max(worst, float(np.max(h)))
        return worst


def _check_finite(name, value, **args):
    value = np.asarray(value)
    if not np.all(np.isfinite(value)):
        bad = np.argwhere(~np.isfinite(value))[0]
        detail = {k: np.asarray(v)[tuple(bad[: np.ndim(v)])] if np.ndim(v) else v for k, v in args.items()}
        raise EvaluationError(f"{name} returned non-finite value at index {tuple(bad)}; arguments {detail}")
    return value


def build_control_driver(beta: Callable, f: Callable, r: float, minimizer: Callable) -> Callable:
    """Hamiltonian ``H = -r y + inf_a [beta(t,x,mu,a).z + f(x,mu,a)]``.

    ``minimizer(t, x, mu, z)`` must return an exact minimiser with shape
    ``(..., M, k)``; ``beta`` returns ``(..., M, d)`` and ``f`` ``(..., M)``.
    """

    def driver_H(t, x, mu, y, z):
        a = minimizer(t, x, mu, z)
        drift = _check_finite("beta", beta(t, x, mu, a), x=x, z=z)
        cost = _check_finite("f", f(x, mu, a), x=x, z=z)
        return -r * np.asarray(y) + np.sum(drift * z, axis=-1) + cost

    return driver_H


def scan_minimizer(beta: Callable, f: Callable, candidates) -> Callable:
    """Minimiser by exhaustive scan over a finite candidate set of controls."""
    cands = np.asarray(candidates, dtype=float)
    if cands.ndim == 1:
        cands = cands[:, None]

    def minimizer(t, x, mu, z):
        best_val = None
        best = None
        shape = np.broadcast_shapes(np.shape(x)[:-1], np.shape(z)[:-1])
        for c in cands:
            a = np.broadcast_to(c, shape + c.shape)
            val = np.sum(beta(t, x, mu, a) * z, axis=-1) + f(x, mu, a)
            if best is None:
                best_val, best = val, np.array(a)
            else:
                better = val < best_val
                best_val = np.where(better, val, best_val)
                best = np.where(better[..., None], a, best)
        return best

    return minimizer


def grid_minimizer(beta: Callable, f: Callable, lo: float, hi: float, points: int = SCAN_POINTS) -> Callable:
    """Scalar-control fallback: uniform grid of ``points`` controls on [lo, hi]."""
    return scan_minimizer(beta, f, np.linspace(lo, hi, points))


# ---------------------------------------------------------------- assumptions


@dataclass
class AssumptionReport:
    probe_count: int
    lipschitz_b: float
    lipschitz_sigma: float
    lipschitz_sigma0: float
    lipschitz_Hb_yz: float
    lipschitz_Hb_xmu: float
    lipschitz_G: float
    sigma_max_norm: float
    sigma_pinv_max_norm: float
    sigma_bounded: bool
    sigma_pinv_bounded: bool
    mu0_moment: float
    moment_order: float
    origin_coefficients_finite: bool
    violations: list
    status: str = "observed"

    def to_dict(self) -> dict:
        return asdict(self)


def _ratio(num, den):
    num = np.asarray(num, dtype=float)
    den = np.asarray(den, dtype=float)
    out = np.zeros_like(num)
    ok = den > 1e-14
    out[ok] = num[ok] / den[ok]
    return float(np.max(out)) if out.size else 0.0


def _probe_pairs(spec: ModelSpec, count: int, rng: np.random.Generator):
    d = spec.d
    t = rng.uniform(0.0, spec.horizon_T, size=count)
    x = PROBE_X_SCALE * rng.standard_normal((count, 1, d))
    mu = rng.standard_normal((count, PROBE_ATOMS, d))
    x2 = PROBE_X_SCALE * rng.standard_normal((count, 1, d))
    mu2 = rng.standard_normal((count, PROBE_ATOMS, d))
    kind = np.arange(count) % 3
    # kind 1: local move in x only, kind 2: local move in mu only
    x2 = np.where((kind == 1)[:, None, None], x + 0.1 * rng.standard_normal((count, 1, d)), x2)
    x2 = np.where((kind == 2)[:, None, None], x, x2)
    mu2 = np.where((kind == 1)[:, None, None], mu, mu2)
    mu2 = np.where((kind == 2)[:, None, None], mu + 0.1 * rng.standard_normal((count, PROBE_ATOMS, d)), mu2)
    return t, x, mu, x2, mu2


def validate_assumptions(
    spec: ModelSpec,
    probe_count: int = 600,
    rng: Optional[np.random.Generator] = None,
    *,
    cap: float = 1e6,
    moment_q: float = 2.0,
    moment_samples: int = 20000,
    raise_on_singular: bool = True,
) -> AssumptionReport:
    """Observed Lipschitz moduli of the coefficients on random probe pairs.

    Probes: t uniform on [0, T], x ~ 3 N(0, I), mu the empirical measure of 16
    standard normal atoms. Pairs are a mix of independent draws, local moves in
    x alone and local moves in mu alone. All moduli are lower bounds of the
    true constants.
    """
    if probe_count < 2:
        raise ValueError("probe_count must be >= 2")
    rng = np.random.default_rng(0) if rng is None else rng
    t, x, mu, x2, mu2 = _probe_pairs(spec, probe_count, rng)
    w2 = np.array([wasserstein2(EmpiricalMeasure(a), EmpiricalMeasure(b)) for a, b in zip(mu, mu2)])
    dx = np.linalg.norm(x[:, 0] - x2[:, 0], axis=-1)
    gap = dx + w2
    violations = []

    tb = t[:, None, None]
    b1 = spec.drift_b(tb, x, mu)[:, 0]
    b2 = spec.drift_b(tb, x2, mu2)[:, 0]
    lip_b = _ratio(np.linalg.norm(b1 - b2, axis=-1), gap)

    s1 = spec.vol_sigma(tb, x, mu)[:, 0]
    s2 = spec.vol_sigma(tb, x2, mu2)[:, 0]
    lip_s = _ratio(np.linalg.norm(s1 - s2, axis=(-2, -1)), gap)
    s01 = spec.vol_sigma0(tb, x, mu)[:, 0]
    s02 = spec.vol_sigma0(tb, x2, mu2)[:, 0]
    lip_s0 = _ratio(np.linalg.norm(s01 - s02, axis=(-2, -1)), gap)

    big_sigma = s1 @ np.swapaxes(s1, -1, -2)
    cond = np.linalg.cond(big_sigma)
    singular = ~np.isfinite(cond) | (cond > 1e12)
    if np.any(singular):
        where = [(float(t[k]), x[k, 0].tolist(), "16-atom probe cloud") for k in np.flatnonzero(singular)[:5]]
        msg = f"sigma sigma^T numerically singular at {int(singular.sum())} probes"
        violations.append(msg)
        if raise_on_singular:
            raise InvertibilityError(msg, where)
        pinv_max = float("inf")
    else:
        pinv = np.swapaxes(s1, -1, -2) @ np.linalg.inv(big_sigma)
        pinv_max = float(np.max(np.linalg.norm(pinv, axis=(-2, -1))))
    sig_max = float(np.max(np.linalg.norm(s1, axis=(-2, -1))))

    y = PROBE_X_SCALE * rng.standard_normal((probe_count, 1))
    z = PROBE_X_SCALE * rng.standard_normal((probe_count, 1, spec.d))
    y2 = y + 0.1 * rng.standard_normal((probe_count, 1))
    z2 = z + 0.1 * rng.standard_normal((probe_count, 1, spec.d))
    h1 = spec.driver_Hb(tb, x, mu, y, z)[:, 0]
    h2 = spec.driver_Hb(tb, x, mu, y2, z2)[:, 0]
    lip_h1 = _ratio(np.abs(h1 - h2), np.abs(y - y2)[:, 0] + np.linalg.norm(z - z2, axis=-1)[:, 0])
    h3 = spec.driver_Hb(tb, x2, mu2, y, z)[:, 0]
    growth = 1 + np.linalg.norm(x[:, 0], axis=-1) + np.linalg.norm(x2[:, 0], axis=-1)
    growth = growth + np.sqrt(cloud_m2(mu)) + np.sqrt(cloud_m2(mu2))
    lip_h2 = _ratio(np.abs(h1 - h3), growth * gap)

    g1 = spec.terminal_G(mu)
    g2 = spec.terminal_G(mu2)
    lip_g = _ratio(np.abs(g1 - g2), (np.sqrt(cloud_m2(mu)) + np.sqrt(cloud_m2(mu2))) * w2)

    order = 4.0 * moment_q
    draws = spec.mu0_sampler(rng.standard_normal((moment_samples, spec.d)))
    mu0_moment = float(np.mean(np.linalg.norm(draws, axis=-1) ** order) ** (1.0 / order))

    grid = np.linspace(0.0, spec.horizon_T, 33)[:, None, None]
    origin = np.zeros((33, 1, spec.d))
    delta0 = np.zeros((33, 1, spec.d))
    origin_vals = [spec.drift_b(grid, origin, delta0), spec.vol_sigma(grid, origin, delta0),
                   spec.vol_sigma0(grid, origin, delta0)]
    origin_ok = all(np.all(np.isfinite(v)) for v in origin_vals)

    moduli = {"[b]": lip_b, "[sigma]": lip_s, "[sigma0]": lip_s0, "[H_b]_1": lip_h1,
              "[H_b]_2": lip_h2, "[G]": lip_g}
    for key, val in moduli.items():
        if not np.isfinite(val) or val > cap:
            violations.append(f"{key} observed modulus {val:.3g} exceeds cap {cap:.3g}")
    if sig_max > cap:
        violations.append("sigma unbounded on probes")
    if pinv_max > cap:
        violations.append("sigma pseudo-inverse unbounded on probes")
    if not np.isfinite(mu0_moment):
        violations.append(f"mu0 moment of order {order} not finite")
    if not origin_ok:
        violations.append("coefficients at (t, 0, delta_0) not finite")

    return AssumptionReport(
        probe_count=probe_count,
        lipschitz_b=lip_b,
        lipschitz_sigma=lip_s,
        lipschitz_sigma0=lip_s0,
        lipschitz_Hb_yz=lip_h1,
        lipschitz_Hb_xmu=lip_h2,
        lipschitz_G=lip_g,
        sigma_max_norm=sig_max,
        sigma_pinv_max_norm=pinv_max,
        sigma_bounded=sig_max <= cap,
        sigma_pinv_bounded=pinv_max <= cap,
        mu0_moment=mu0_moment,
        moment_order=order,
        origin_coefficients_finite=bool(origin_ok),
        violations=violations,
    )


# ------------------------------------------------------------------ LQ model


@dataclass(frozen=True)
class LqParams:
    """One-dimensional LQ mean-field control data (discount fixed to 0).

    State drift ``a x + alpha``, running cost ``q x^2 + qbar mean^2 + rho alpha^2``,
    terminal cost ``g m2 + gbar mean^2``; exploration drift
    ``b0 + b1 x + b2 mean``; mu0 = N(mu0_mean, mu0_std^2).
    """

    a: float = 0.0
    q: float = 1.0
    qbar: float = 0.5
    g: float = 0.3
    gbar: float = 0.1
    sigma: float = 0.4
    sigma0: float = 0.3
    T: float = 1.0
    rho: float = 1.0
    b0: float = 0.0
    b1: float = -0.2
    b2: float = 0.1
    mu0_mean: float = 0.5
    mu0_std: float = 0.5

    def __post_init__(self):
        if not self.T > 0:
            raise ValueError("T must be > 0")
        if not self.rho > 0:
            raise ValueError("control cost weight rho must be > 0 (driver infimum would be -inf)")
        if self.mu0_std < 0:
            raise ValueError("mu0_std must be >= 0")

    @classmethod
    def acceptance(cls) -> "LqParams":
        return cls()

    def to_dict(self) -> dict:
        return asdict(self)


def lq_model(params: LqParams, minimizer: Optional[Callable] = None) -> ModelSpec:
    """ModelSpec of the LQ instance (d = n = m = 1).

    The control minimiser defaults to the closed form ``alpha* = -z / (2 rho)``.
    """
    p = params

    def beta(t, x, mu, alpha):
        return p.a * x + alpha

    def f(x, mu, alpha):
        xbar = cloud_mean(mu)[..., None, :]
        return p.q * np.sum(x * x, -1) + p.qbar * np.sum(xbar * xbar, -1) + p.rho * np.sum(alpha * alpha, -1)

    def closed_form(t, x, mu, z):
        return -np.asarray(z) / (2.0 * p.rho)

    driver_H = build_control_driver(beta, f, 0.0, minimizer or closed_form)

    def drift_b(t, x, mu):
        return p.b0 + p.b1 * x + p.b2 * cloud_mean(mu)[..., None, :]

    def vol_sigma(t, x, mu):
        return np.full(np.shape(x) + (1,), p.sigma)

    def vol_sigma0(t, x, mu):
        return np.full(np.shape(x) + (1,), p.sigma0)

    def terminal_G(mu):
        xbar = cloud_mean(mu)
        return p.g * cloud_m2(mu) + p.gbar * np.sum(xbar * xbar, -1)

    def mu0_sampler(z):
        return p.mu0_mean + p.mu0_std * np.asarray(z)

    affine = AffineStructure(
        b0=np.array([p.b0]), b1=np.array([[p.b1]]), b2=np.array([[p.b2]]),
        sigma=np.array([[p.sigma]]), sigma0=np.array([[p.sigma0]]),
        mu0_mean=np.array([p.mu0_mean]), mu0_cov=np.array([[p.mu0_std**2]]),
    )
    model = ModelSpec(
        d=1, n=1, m=1, drift_b=drift_b, vol_sigma=vol_sigma, vol_sigma0=vol_sigma0,
        driver_H=driver_H, terminal_G=terminal_G, mu0_sampler=mu0_sampler,
        horizon_T=p.T, name="lq", affine=affine, params=p.to_dict(), control=(beta, f),
    )
    return model


def geometric_model(drift: float = 0.05, vol: float = 0.2, x0: float = 1.0, T: float = 1.0) -> ModelSpec:
    """Non-interacting geometric Brownian motion ``dX = drift X dt + vol X dW`` (no common noise).

    Used as a strong-order benchmark: ``X_T = x0 exp((drift - vol^2/2) T + vol W_T)``.
    """

    def drift_b(t, x, mu):
        return drift * np.asarray(x)

    def vol_sigma(t, x, mu):
        return vol * np.asarray(x)[..., None]

    def vol_sigma0(t, x, mu):
        return np.zeros(np.shape(x) + (1,))

    def zero(t, x, mu, y, z):
        return np.zeros(np.broadcast_shapes(np.shape(x)[:-1], np.shape(y)))

    def terminal_G(mu):
        return np.zeros(np.shape(mu)[:-2])

    def mu0_sampler(z):
        return np.full(np.shape(z), x0)

    return ModelSpec(d=1, n=1, m=1, drift_b=drift_b, vol_sigma=vol_sigma, vol_sigma0=vol_sigma0,
                     driver_H=zero, terminal_G=terminal_G, mu0_sampler=mu0_sampler, horizon_T=T,
                     name="geometric", params={"drift": drift, "vol": vol, "x0": x0, "T": T})
