"""Schedule-aligned diffusion/flow toolkit with analytic Gaussian-mixture
teachers, prediction-parameterization algebra, and few-step score
distillation on toy data."""

__version__ = "0.1.0"

from .errors import ConfigError, ConsistencyError, DivergenceError, DomainError

__all__ = [
    "ConfigError",
    "ConsistencyError",
    "DivergenceError",
    "DomainError",
    "__version__",
]
