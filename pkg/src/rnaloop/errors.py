"""Exception taxonomy shared across the package."""


class RnaLoopError(Exception):
    """Base class for all package errors."""


class DimensionError(RnaLoopError, ValueError):
    """Tensor shapes are incompatible for the requested operation."""


class ConfigurationError(RnaLoopError, ValueError):
    """A config value is invalid or inconsistent with the rest of the setup."""


class ContractError(RnaLoopError, RuntimeError):
    """An API precondition or internal invariant was violated."""


class DegenerateSupervisionError(RnaLoopError, ValueError):
    """A supervision mask selects no pixels at all."""


class TrainingError(RnaLoopError, RuntimeError):
    """Training diverged (non-finite loss)."""


class SerializationError(RnaLoopError, ValueError):
    """An artifact file is corrupt or has an unsupported version."""


class ArtifactError(RnaLoopError, FileNotFoundError):
    """A referenced artifact path could not be resolved."""
