"""Reduced-order probabilistic tsunami wave-height forecasting.

Pipeline: shallow-water simulation, modal decomposition of the snapshots,
Galerkin projection to a quadratic coefficient ODE, trained operator
corrections for stability, hierarchical Bayesian calibration of initial
coefficients against sensor records, and posterior predictive forecasts
with credible and prediction bands.
"""

from .errors import (CflError, ConfigError, DomainError, NumericalError,
                     ProvenanceError, StructuralError, WavecastError)

__version__ = "0.1.0"

__all__ = [
    "WavecastError", "ConfigError", "DomainError", "StructuralError",
    "NumericalError", "CflError", "ProvenanceError", "__version__",
]
