"""Exception hierarchy shared by all modules."""

from __future__ import annotations


class SmallNoiseError(Exception):
    """Base class for every error raised by this package."""


class ConfigurationError(SmallNoiseError, ValueError):
    """Inputs are inconsistent (dimensions, grids, empty samples, bad config)."""

    def __init__(self, message: str, errors: list[tuple[str, str]] | None = None):
        super().__init__(message)
        # (json pointer, message) pairs when raised from config loading
        self.errors = list(errors or [])


class CoefficientError(SmallNoiseError, ArithmeticError):
    """A coefficient returned a non-finite value at a finite input."""

    def __init__(self, message: str, witness: tuple | None = None):
        super().__init__(message)
        self.witness = witness


class UncertifiedConstantsError(SmallNoiseError):
    """A bound check was requested with constants no validator certified."""


class BlowUpError(SmallNoiseError, ArithmeticError):
    """A deterministic trajectory became non-finite."""

    def __init__(self, message: str, step: int, time: float):
        super().__init__(message)
        self.step = step
        self.time = time


class InsufficientDataError(SmallNoiseError, ValueError):
    """Too few usable points remain for a regression or estimate."""
