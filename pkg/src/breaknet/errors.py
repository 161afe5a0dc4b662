"""Exception types shared across breaknet."""


class BreaknetError(Exception):
    """Base class for all package errors."""


class ValidationError(BreaknetError, ValueError):
    """Input data violates a structural or referential rule."""


class ConfigError(BreaknetError, ValueError):
    """A run configuration is missing or malformed."""


class FitError(BreaknetError, RuntimeError):
    """A numerical fit could not be carried out."""


class SeparationError(FitError):
    """Outcomes are (quasi-)perfectly separated; no finite MLE exists."""


class RankDeficiencyError(FitError):
    """Design columns are linearly dependent."""

    def __init__(self, message, terms=()):
        super().__init__(message)
        self.terms = tuple(terms)
