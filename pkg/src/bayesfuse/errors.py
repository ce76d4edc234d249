"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class NumericError(ValueError):
    """An input or result violates a finiteness requirement."""


class ConfigError(ValueError):
    """A configuration value is out of its allowed range or inconsistent."""


class ValidationError(ValueError):
    """A dataset or distribution invariant does not hold."""


class DataFormatError(ValueError):
    """A file does not match the expected magic, version, or layout."""


class DataLengthError(DataFormatError):
    """A binary block is truncated or sized inconsistently with its header."""


class JoinError(ValueError):
    """Sample ids do not line up across the files being joined."""


class ParseError(ValueError):
    """A cell could not be parsed; carries row/column context in the message."""


class PrerequisiteError(RuntimeError):
    """A pipeline command was invoked before the artifacts it needs exist."""
