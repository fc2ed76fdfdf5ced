"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class DomainError(ValueError):
    """Input values fall outside an operation's mathematical domain."""


class StateError(RuntimeError):
    """An object is in a state that forbids the requested operation."""
