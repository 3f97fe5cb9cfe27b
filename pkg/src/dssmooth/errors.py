"""Exception taxonomy shared across the package.

Everything derives from ValueError so callers that only care about
"bad input" can catch one type, while tests can pin the precise failure.
"""


class DSSmoothError(ValueError):
    """Base class for all package-specific errors."""


class ShapeError(DSSmoothError):
    """Operands have incompatible or malformed shapes."""


class DomainError(DSSmoothError):
    """A numeric argument lies outside the mathematically valid domain."""


class ParameterError(DSSmoothError):
    """A configuration parameter violates its contract."""


class InputError(DSSmoothError):
    """A collection-valued input is empty, incomplete, or malformed."""


class DegenerateWindowError(DSSmoothError):
    """A pooling window contains no unmasked positions."""


class DegenerateTriggerError(DSSmoothError):
    """The trigger produces no measurable embedding deviation at any scale."""


class WatermarkBudgetError(DSSmoothError):
    """A measured watermark perturbation exceeds its configured budget."""


class TrainingError(DSSmoothError):
    """Training diverged (non-finite loss or parameters)."""


class CalibrationError(DSSmoothError):
    """The calibration set is too small for the requested quantile."""


class CheckpointError(DSSmoothError):
    """A serialized model or record cannot be read back."""


class ParseError(DSSmoothError):
    """A dataset file violates the expected on-disk format."""
