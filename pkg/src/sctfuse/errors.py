"""Exception types shared across the package."""


class ShapeError(ValueError):
    """An array/tensor does not satisfy a shape contract."""


class ConfigError(ValueError):
    """A configuration value violates its invariants."""


class ContractError(ValueError):
    """A call precondition was violated (bad pairing, duplicates, ...)."""


class DegenerateInputError(ValueError):
    """Input is valid in shape but degenerate in content (e.g. all-zero MRI)."""


class VolumeIOError(IOError):
    """A volume file could not be read or written."""


class BackboneLoadError(IOError):
    """A backbone weight file is missing, unreadable, or incomplete."""


class CheckpointError(RuntimeError):
    """A checkpoint file is corrupt or from an incompatible format version."""


class NonFiniteLossError(RuntimeError):
    """Training produced a NaN/Inf loss; carries a diagnostic record."""

    def __init__(self, message, record=None):
        super().__init__(message)
        self.record = record
