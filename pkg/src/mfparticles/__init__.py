"""N-particle FBSDE approximation of PDEs on the Wasserstein space."""

from .empirical import EmpiricalMeasure, lift, mean, second_moment_norm, wasserstein2
from .model import AnalyticSolution, LqParams, ModelSpec, build_control_driver, lq_model, validate_assumptions
from .lq import lq_problem, solve_riccati
from .sim import ParticlePaths, LimitPaths, simulate_particles, simulate_limit, moment_monitor
from .bsde import BackwardSolution, BasisSpec, evaluate_analytic, solve_lsmc, correction_term

__version__ = "0.1.0"
