"""Exception types shared across the package.

CLI exit codes: ValidationError and subclasses map to exit code 2,
NumericError to exit code 3.
"""


class ValidationError(ValueError):
    """Input, state, or file content violates a documented invariant."""


class ParseError(ValidationError):
    """A file could not be parsed; message carries line context when known."""


class ConfigError(ValidationError):
    """A configuration value is out of range or unsatisfiable."""


class StateError(ValidationError):
    """An operation was called in a state that does not permit it."""


class NumericError(ArithmeticError):
    """A non-finite value surfaced where finite math was required.

    Carries ``last_good`` when raised by the trainer so the most recent
    finite checkpoint can still be persisted.
    """

    def __init__(self, message, last_good=None):
        super().__init__(message)
        self.last_good = last_good
