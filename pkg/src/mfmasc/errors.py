"""Exception types raised across the package."""


class ContractError(ValueError):
    """An operation was called outside its documented preconditions."""


class ShapeError(ContractError):
    """Operand shapes are incompatible."""


class FormatError(ValueError):
    """A file on disk is malformed or unsupported."""


class ConfigError(ValueError):
    """A configuration record failed validation."""


class TrainingError(RuntimeError):
    """Training diverged (non-finite loss)."""
