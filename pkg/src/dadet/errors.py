"""Exception hierarchy shared across the package."""


class DadetError(Exception):
    """Base class for all package errors."""


class ConfigurationError(DadetError):
    """A config file, spec field, or CLI argument is invalid."""


class DataError(DadetError):
    """Input data violates a declared precondition (bad class id, malformed manifest, ...)."""


class ContractViolationError(DadetError):
    """An operation was called outside its contract (e.g. detection loss on a target sample)."""


class CheckpointError(DadetError):
    """Checkpoint header mismatch or corrupt checkpoint file."""


class TrainingDivergedError(DadetError):
    """A loss term became NaN/Inf during training; the message names the term."""
