"""Exception taxonomy shared by all ultravar modules."""


class UltraVarError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(UltraVarError):
    """Operand shapes violate an operation's contract."""


class NumericError(UltraVarError):
    """A computation produced NaN/Inf or failed to converge."""


class ConfigError(UltraVarError):
    """Invalid or inconsistent configuration values."""


class StateError(UltraVarError):
    """Operation attempted in an invalid state (e.g. missing trained params)."""


class CheckpointError(UltraVarError):
    """Checkpoint file is malformed, corrupted, or version-incompatible."""


class DataError(UltraVarError):
    """Dataset file (image or manifest) is malformed or unreadable."""
