"""Exception taxonomy shared across the package."""


class VPerturbError(Exception):
    """Base class for all package errors."""


class InputError(VPerturbError, ValueError):
    """Caller passed structurally invalid arguments (shape, range, missing key)."""


class DomainError(VPerturbError, ValueError):
    """Mathematically invalid input (non-PD covariance, vanishing density, ...)."""


class SequencingError(VPerturbError, RuntimeError):
    """Schedule operations called out of order (predictability sentinel)."""


class AdmissibilityError(VPerturbError, ValueError):
    """A synchronized reference was requested without a valid certificate."""


class FormatError(VPerturbError, ValueError):
    """Malformed or version-incompatible file content."""


class RunError(VPerturbError, RuntimeError):
    """A computation diverged or produced nonfinite values."""


class ConfigError(VPerturbError, ValueError):
    """Invalid or inconsistent configuration."""
