"""Shared exception types.

Artifact-file errors live in lpb.artifacts since they carry byte offsets.
"""


class ContractError(ValueError):
    """A documented precondition was violated by the caller."""


class ShapeError(ContractError):
    """Operands have incompatible shapes; message names both."""


class NumericError(ArithmeticError):
    """A non-finite value appeared where the contract requires finite math."""
