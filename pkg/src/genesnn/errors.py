"""Exception types shared across the package."""


class ShapeMismatchError(ValueError):
    """Array shapes or vector lengths do not agree."""


class NumericalError(FloatingPointError):
    """A NaN or Inf appeared where finite values are required."""


class StateError(RuntimeError):
    """An object was used out of protocol order (e.g. two asks without a tell)."""


class ParseError(ValueError):
    """A data or config file is malformed."""
