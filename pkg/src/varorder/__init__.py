"""Variable-order subdiffusion: forward solvers, small-p asymptotics and order recovery."""

from .asymptotics import AsymptoticExpansion, expansion_coefficients, verify_expansion
from .inversion import ExponentFit, RecoveredOrder, fit_exponents, recover_breakpoints, recover_constant_rho, recover_range
from .laplace_domain import LaplaceSolution, solve_bvp
from .model import (
    BoundaryExcitation,
    MediumCoefficients,
    PiecewiseOrder,
    PiecewisePolynomial,
    ProblemSpec,
    ghat,
    load_problem,
    save_problem,
    validate,
)
from .time_domain import ContourConfig, FluxSeries, forward_flux_time, laplace_from_time

__all__ = [
    "AsymptoticExpansion",
    "BoundaryExcitation",
    "ContourConfig",
    "ExponentFit",
    "FluxSeries",
    "LaplaceSolution",
    "MediumCoefficients",
    "PiecewiseOrder",
    "PiecewisePolynomial",
    "ProblemSpec",
    "RecoveredOrder",
    "expansion_coefficients",
    "fit_exponents",
    "forward_flux_time",
    "ghat",
    "laplace_from_time",
    "load_problem",
    "recover_breakpoints",
    "recover_constant_rho",
    "recover_range",
    "save_problem",
    "solve_bvp",
    "validate",
    "verify_expansion",
]
