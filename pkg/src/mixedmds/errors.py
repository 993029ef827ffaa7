"""Exception types raised across the package."""


class MixedMDSError(Exception):
    """Base class for package errors."""


class DomainError(MixedMDSError, ValueError):
    """An argument lies outside the domain of a function."""


class ValidationError(MixedMDSError, ValueError):
    """Input data violate dataset invariants.

    ``rows`` lists the offending records (file rows or array indices).
    """

    def __init__(self, message, rows=None):
        super().__init__(message)
        self.rows = list(rows or [])


class ConfigurationError(MixedMDSError, ValueError):
    """Hyperparameters or run settings are inconsistent."""


class DegenerateDataError(MixedMDSError, ValueError):
    """Data that make a quantity undefined (zero variance, zero distance)."""


class DegenerateDrawError(MixedMDSError, ArithmeticError):
    """A posterior draw cannot be normalized."""


class MissingArtifactError(MixedMDSError, FileNotFoundError):
    """A pipeline stage was run before the stage that produces its input."""
