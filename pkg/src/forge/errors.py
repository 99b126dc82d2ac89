"""Exception hierarchy shared across the toolkit.

Every failure mode callers are expected to handle has its own type so
that the service layer can map them onto structured HTTP errors.
"""


class ForgeError(Exception):
    """Base class for all toolkit errors."""


class ShapeError(ForgeError):
    """Tensor extents incompatible with the requested operation."""


class HyperparameterError(ForgeError):
    """A scalar hyperparameter is outside its legal range."""


class ContractError(ForgeError):
    """An internal API contract was violated (e.g. non-scalar loss)."""


class NumericsError(ForgeError):
    """NaN/Inf produced from finite inputs (raised only with debug checks on)."""


class SpecValidationError(ForgeError):
    """A ModelSpec violates one of its structural invariants."""


class FormatError(ForgeError):
    """Malformed archive bytes. Carries the byte offset of the defect."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class IncompatibilityError(ForgeError):
    """Teacher/student pair cannot support the requested selection."""


class MappingError(ForgeError):
    """A student tensor has no teacher counterpart."""


class PlanIntegrityError(ForgeError):
    """A selection plan does not match the shapes it is applied to."""


class LabelError(ForgeError):
    """Targets are not valid one-hot rows or are out of class range."""


class TrainingContractError(ForgeError):
    """Training-loop precondition broken (e.g. missing gradient)."""


class StratificationError(ForgeError):
    """A class is too small to split or subsample as requested."""


class RangeError(ForgeError):
    """A percentage or grid value is outside its legal interval."""


class IngestError(ForgeError):
    """An input image file could not be ingested."""


class ConfigError(ForgeError):
    """An experiment or training configuration is inconsistent."""


class DiagnosticError(ForgeError):
    """A run fell below its minimum quality bar; message suggests remedies."""
