"""Shared exception types.

Everything raised on purpose by this package derives from ValueError so that
callers who do not care about the distinction can catch one thing.
"""


class DomainError(ValueError):
    """An argument lies outside the mathematical domain of an operation
    (e.g. a unit time outside the clamped interval, sigma = 0)."""


class ConfigError(ValueError):
    """A configuration value, key, or combination is invalid."""


class ConsistencyError(ValueError):
    """Inputs that must satisfy an algebraic relation (such as a corrupted
    sample matching its clean sample and noise) fail to do so."""


class DivergenceError(RuntimeError):
    """A training loop tripped its divergence guard (non-finite or exploding
    loss)."""
