"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Tensor extents incompatible with the requested operation."""


class TapeError(RuntimeError):
    """Differentiation tape used outside its contract (stale, consumed, missing)."""


class LifecycleError(RuntimeError):
    """Branch state transition violates the Active/Masked/Pruned lifecycle."""


class ConfigError(ValueError):
    """Invalid model or training configuration."""


class DataError(ValueError):
    """Malformed volume, label, or manifest data."""


class CheckpointError(RuntimeError):
    """Checkpoint file is corrupt or inconsistent with its manifest."""


class NumericError(ArithmeticError):
    """Non-finite value where a finite one is required."""
