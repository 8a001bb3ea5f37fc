"""Exception taxonomy shared by every avrobust module.

The CLI maps these onto exit codes: configuration problems exit 2,
I/O and container-format problems exit 3, domain validation exits 4.
"""


class AvrobustError(Exception):
    """Base class for all errors raised by this package."""


class ValidationError(AvrobustError):
    """Input data violates a documented precondition."""


class DimensionError(ValidationError):
    """Array shapes are inconsistent with the requested operation."""


class ConfigurationError(AvrobustError):
    """A parameter value is outside its legal range or set."""


class ConfigFileError(ConfigurationError):
    """An experiment config file failed to parse or validate.

    Carries the 1-based line number when the offending line is known.
    """

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class StateError(AvrobustError):
    """An object was used in an order its lifecycle forbids."""


class FormatError(AvrobustError):
    """A binary container or checkpoint file is malformed."""
