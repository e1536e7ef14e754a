"""Exception types shared across the package.

I/O failures are reported with the builtin OSError; everything
domain-specific derives from PamError so callers can catch broadly.
"""


class PamError(Exception):
    """Base class for all package-specific errors."""


class DimensionError(PamError):
    """Operands live in different coordinate spaces or have bad shapes."""


class FormatError(PamError):
    """A serialized artifact is malformed or fails validation on load."""


class LabelError(PamError):
    """A label falls outside the active class set."""


class EmptyDataError(PamError):
    """An operation received a dataset with no samples."""


class ConfigError(PamError):
    """A configuration value or combination of values is invalid."""


class NumericalError(PamError):
    """A numeric evaluation produced a non-finite result."""


class UnsupportedModelError(PamError):
    """The requested operation is not defined for this model kind."""


class DegenerateTaskVector(PamError):
    """The merge denominator vanished; no direction to scale."""


class DivergenceError(PamError):
    """Training loss exceeded the divergence threshold."""


class IncompleteRunError(PamError):
    """A metric was requested from a run that did not finish."""
