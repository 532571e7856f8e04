"""Exception hierarchy shared by every stage of the pipeline."""


class EpilineError(Exception):
    """Base class for all errors raised by this package."""


class MaskIOError(EpilineError, OSError):
    """A mask file could not be read or written."""


class MaskFormatError(EpilineError, ValueError):
    """A mask file or packed container is malformed."""


class DegenerateInputError(EpilineError, ValueError):
    """Inputs do not determine the requested geometric object."""


class InconsistentInputError(EpilineError, ValueError):
    """Inputs violate an incidence precondition."""


class DomainError(EpilineError, ValueError):
    """Argument outside the domain of the operation."""


class InvariantViolationError(EpilineError, ValueError):
    """A value does not satisfy its type invariant."""


class UndefinedCorrelationError(DomainError):
    """Correlation requested for a constant barcode."""


class InsufficientCandidatesError(EpilineError):
    """Not enough candidate line pairs to continue."""


class DegenerateSampleError(EpilineError):
    """A RANSAC sample produced an ill-conditioned model; the trial is skipped."""


class EstimationFailure(EpilineError):
    """Every RANSAC trial was degenerate."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class ConfigError(EpilineError, ValueError):
    """Invalid scenario or pipeline configuration."""
