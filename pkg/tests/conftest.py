import numpy as np
import pytest
from hypothesis import settings

from mfparticles.model import AffineStructure, LqParams, ModelSpec
from mfparticles.lq import lq_problem

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")


def make_spec(d=1, n=1, m=1, b=None, sigma=None, sigma0=None, H=None, G=None, mu0=None, T=1.0, affine=None):
    """Small generic ModelSpec; coefficients default to zero, mu0 to N(0, I)."""

    def zero_drift(t, x, mu):
        return np.zeros(np.shape(x))

    def zero_vol(k):
        def vol(t, x, mu):
            return np.zeros(np.shape(x) + (k,))
        return vol

    def zero_H(t, x, mu, y, z):
        return np.zeros(np.broadcast_shapes(np.shape(x)[:-1], np.shape(y)))

    def zero_G(mu):
        return np.zeros(np.shape(mu)[:-2])

    return ModelSpec(
        d=d, n=n, m=m,
        drift_b=b or zero_drift,
        vol_sigma=sigma or zero_vol(n),
        vol_sigma0=sigma0 or zero_vol(m),
        driver_H=H or zero_H,
        terminal_G=G or zero_G,
        mu0_sampler=mu0 or (lambda z: np.asarray(z, dtype=float)),
        horizon_T=T,
        affine=affine,
    )


def const_vol(value, k=1):
    def vol(t, x, mu):
        return np.full(np.shape(x) + (k,), float(value))
    return vol


def affine_1d(b0=0.0, b1=0.0, b2=0.0, sigma=0.0, sigma0=0.0, mean0=0.0, std0=1.0):
    return AffineStructure(
        b0=np.array([b0]), b1=np.array([[b1]]), b2=np.array([[b2]]),
        sigma=np.array([[sigma]]), sigma0=np.array([[sigma0]]),
        mu0_mean=np.array([mean0]), mu0_cov=np.array([[std0**2]]),
    )


@pytest.fixture(scope="session")
def fixture_lq():
    """(spec, RiccatiSolution, AnalyticSolution) of the acceptance LQ instance."""
    return lq_problem(LqParams.acceptance())
