"""Exception hierarchy shared by every stage of the inspection pipeline."""


class InspectError(Exception):
    """Base class for all package errors."""


class ConfigError(InspectError, ValueError):
    """Invalid configuration value or unsupported size."""


class ShapeError(InspectError, ValueError):
    """Array or tensor has the wrong dimensionality or shape."""


class CapacityError(InspectError, ValueError):
    """Not enough samples to satisfy the requested split counts."""


class DomainError(InspectError, ValueError):
    """Value outside its admissible domain (unknown class, out-of-range map)."""


class DataError(InspectError, ValueError):
    """Dataset content does not satisfy an operation's preconditions."""


class ProtocolViolation(DataError):
    """Defective samples reached a stage that may only see defect-free data."""


class IntegrityError(InspectError):
    """Checkpoint or artifact failed an integrity check."""


class ContractError(InspectError):
    """A model forward pass violated its declared shape or range contract."""


class NumericError(InspectError, ArithmeticError):
    """Non-finite value encountered during training."""

    def __init__(self, message: str, iteration: int | None = None):
        if iteration is not None:
            message = f"{message} (iteration {iteration})"
        super().__init__(message)
        self.iteration = iteration


class PairingError(InspectError, KeyError):
    """Two manifests that must be paired by sample id do not match."""

    def __str__(self) -> str:
        return str(self.args[0]) if self.args else ""


class DependencyError(InspectError):
    """A pipeline stage was run before the stage it depends on."""
