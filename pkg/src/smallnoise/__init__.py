"""
Small-noise stochastic differential equations and their deterministic limit.

Modules
-------
coeff_expr
    Expression language for coefficients declared in configuration files.
model
    Coefficient fields, truncation and sampled certificates of structural conditions.
paths
    ODE and SDE integrators, reproducible Brownian drivers, ensembles, exit times.
zeroth_order
    Mean-square and sup-deviation studies of ``X^eps -> x`` with explicit bounds.
feynman_kac
    Monte Carlo Cauchy and transport problems and their ``eps = 0`` limit.
cli
    JSON-configured batch front end and the catalog of benchmark problems.
"""

from __future__ import annotations

__version__ = "0.1.0"

from .errors import (BlowUpError, CoefficientError, ConfigurationError,  # noqa: E402
                     InsufficientDataError, SmallNoiseError, UncertifiedConstantsError)

__all__ = [
    "__version__",
    "BlowUpError",
    "CoefficientError",
    "ConfigurationError",
    "InsufficientDataError",
    "SmallNoiseError",
    "UncertifiedConstantsError",
]
