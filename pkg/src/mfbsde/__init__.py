"""Numerical construction and verification of FBSDEs with measurable coefficients.

The pipeline mirrors the constructive route to a strong solution:

1. smooth the coefficients by mollification (:mod:`mfbsde.mollifier`),
2. solve the quasilinear decoupling-field PDE (:mod:`mfbsde.pde`),
3. simulate the decoupled forward SDE and read off ``Y = v(t, X)``,
   ``Z = D_x v(t, X) sigma`` (:mod:`mfbsde.simulate`),
4. check bounds, laws and convergence across levels (:mod:`mfbsde.verify`).
"""

from mfbsde.coefficients import (
    ClosedFormOracle,
    CoefficientSet,
    GrowthSpec,
    ValidationReport,
    bound_R,
    builtin_problem,
    catalog_names,
    load_problem,
    problem_from_dict,
    validate_growth,
)
from mfbsde.mollifier import (
    MollifiedCoefficients,
    MollifierKernel,
    make_kernel,
    mollify,
    mollify_coefficients,
    uniform_gap,
)
from mfbsde.pde import (
    AprioriReport,
    DecouplingField,
    GridSpec,
    check_apriori,
    gradient,
    solve_decoupling_field,
)
from mfbsde.simulate import (
    MalliavinEnsemble,
    PathEnsemble,
    brownian_increments,
    compactness_statistics,
    reconstruct_yz,
    simulate_forward,
    simulate_malliavin,
)

__version__ = "0.1.0"

__all__ = [
    "AprioriReport",
    "ClosedFormOracle",
    "CoefficientSet",
    "DecouplingField",
    "GridSpec",
    "GrowthSpec",
    "MalliavinEnsemble",
    "MollifiedCoefficients",
    "MollifierKernel",
    "PathEnsemble",
    "ValidationReport",
    "bound_R",
    "brownian_increments",
    "builtin_problem",
    "catalog_names",
    "load_problem",
    "problem_from_dict",
    "check_apriori",
    "compactness_statistics",
    "gradient",
    "make_kernel",
    "mollify",
    "mollify_coefficients",
    "reconstruct_yz",
    "simulate_forward",
    "simulate_malliavin",
    "solve_decoupling_field",
    "uniform_gap",
    "validate_growth",
]
