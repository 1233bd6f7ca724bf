"""Shared exception types.

Kept in one place so the CLI can map them onto process exit codes without
importing every module.
"""


class ContractError(ValueError):
    """An API precondition was violated (shapes, tapes, argument domains)."""


class ConfigError(ValueError):
    """An experiment configuration is malformed or inconsistent."""


class DataFormatError(ValueError):
    """A data file (CSV, JSON checkpoint) does not match its format contract."""


class NumericsError(RuntimeError):
    """A numerical procedure failed (divergence, degenerate sampling, ...)."""


class NonFiniteError(NumericsError):
    """A NaN or infinity appeared where a finite value is required."""


class OutsideDomainError(ValueError):
    """A gridded field was queried outside its convex data hull."""
