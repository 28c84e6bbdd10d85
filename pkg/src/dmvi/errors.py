"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand shapes are incompatible; message names both shapes."""


class ContractError(ValueError):
    """A documented precondition was violated by the caller."""


class NumericsError(RuntimeError):
    """A non-finite value or numeric divergence made the result meaningless."""


class ParseError(ValueError):
    """Malformed external file; message carries the byte offset."""
