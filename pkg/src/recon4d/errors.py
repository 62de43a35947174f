"""Exception types shared across the package."""


class ContractError(ValueError):
    """A precondition of an operation was violated by the caller."""


class ShapeError(ContractError):
    """Operand shapes are incompatible (no implicit broadcasting)."""


class FormatError(ValueError):
    """A file on disk is truncated, corrupt, or of an unknown version."""


class SingularError(ArithmeticError):
    """A matrix that must be invertible (or full rank) is not."""


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""
