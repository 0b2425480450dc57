class InvalidInputError(ValueError):
    """Shape, range, or finiteness violation in a kernel or engine input."""


class NumericError(ArithmeticError):
    """A computed intermediate became non-finite."""


class OutOfMemoryError(RuntimeError):
    """The block pool or the state pool cannot satisfy an allocation."""
