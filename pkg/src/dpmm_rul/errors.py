class InvalidInputError(ValueError):
    """Raised when an argument violates an operation's precondition."""


class InvalidStateError(RuntimeError):
    """Raised when an object is used in a state that forbids the call."""


class DataError(ValueError):
    """Malformed or inconsistent input files."""
