"""Shared exception types."""


class ConfigError(ValueError):
    """Invalid configuration: bad shapes, unknown dataset kinds, non-positive sizes."""


class ContractError(RuntimeError):
    """An operation was called in a way that violates its contract."""


class DivergenceError(RuntimeError):
    """Training or sampling produced non-finite values or collapsed."""
