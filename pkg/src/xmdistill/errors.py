"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand shapes are inconsistent with the operation's contract."""


class DataError(ValueError):
    """Input data violates a value-range contract (e.g. label ids out of range)."""


class NumericError(RuntimeError):
    """A computation produced NaN/Inf where finite values are required."""


class MissingArtifactError(FileNotFoundError):
    """A required checkpoint or dataset is absent."""


class ConfigError(ValueError):
    """An experiment configuration is malformed or inconsistent."""
