"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand shapes are incompatible, or a tensor has the wrong rank."""


class DegenerateInputError(ValueError):
    """Input is numerically degenerate (zero-norm vector, constant features)."""


class ConfigError(ValueError):
    """A configuration value is out of its allowed range."""


class SamplingError(ValueError):
    """An episode cannot be drawn from the dataset."""


class FormatError(ValueError):
    """A tensor container file is malformed."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class NumericFailure(ArithmeticError):
    """NaN or Inf showed up where finite values are required."""

    def __init__(self, message: str, seed=None):
        if seed is not None:
            message = f"{message} [episode seed {seed}]"
        super().__init__(message)
        self.seed = seed


class VersionError(ValueError):
    """A checkpoint does not match the format version or the requested config."""
