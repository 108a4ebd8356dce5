"""Exception taxonomy shared by all modules.

The CLI maps these onto exit codes: configuration errors to 2, data and
format errors to 3, training and contract failures to 4.
"""


class IveditError(Exception):
    """Base class for all package errors."""


class ConfigurationError(IveditError):
    """Invalid configuration value or combination."""


class InputError(IveditError):
    """Invalid runtime input (shape, range, dimension mismatch)."""


class FormatError(IveditError):
    """Malformed file or directory layout."""


class CheckpointError(FormatError):
    """Malformed or incompatible checkpoint container."""


class ContractError(IveditError):
    """An internal invariant between components was violated."""


class TrainingError(IveditError):
    """Training diverged or could not proceed."""


class DatasetError(IveditError):
    """Dataset lacks admissible samples for the requested configuration."""
