"""Exception types shared across the package.

Exit-code mapping for the CLI: ConfigError and DataError terminate with
code 2 (usage / missing inputs), NumericError with code 3.
"""


class ShapeError(ValueError):
    """An array has the wrong rank, size, or a non-square region where one is required."""


class CompositionError(ValueError):
    """An outcome list violates the one-outcome-per-task composition rule."""


class ConfigError(ValueError):
    """A configuration value is outside its documented domain."""


class DataError(RuntimeError):
    """A dataset is missing, incomplete, or internally inconsistent."""


class FormatError(ValueError):
    """A binary record does not match the on-disk format.

    ``byte_offset`` locates the first offending byte when known.
    """

    def __init__(self, message: str, byte_offset: int | None = None):
        if byte_offset is not None:
            message = f"{message} (byte offset {byte_offset})"
        super().__init__(message)
        self.byte_offset = byte_offset


class NumericError(FloatingPointError):
    """A computation produced or received non-finite values."""
