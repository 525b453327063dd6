"""Exception hierarchy shared across the toolkit.

The CLI maps these onto exit codes: ConfigError -> 2, NumericalError -> 3,
ProvenanceError -> 4.
"""


class WavecastError(Exception):
    """Base class for all toolkit errors."""


class ConfigError(WavecastError):
    """Invalid or inconsistent configuration."""


class DomainError(WavecastError):
    """Input outside the valid domain of an operation."""


class StructuralError(WavecastError):
    """Shape / grid / metadata mismatch between artifacts."""


class NumericalError(WavecastError):
    """Numerical failure (CFL violation, NaN, SVD breakdown, bad covariance)."""


class CflError(NumericalError):
    """Time step violates the CFL stability bound."""


class ProvenanceError(WavecastError):
    """Artifact checksum mismatch or missing upstream artifact."""
