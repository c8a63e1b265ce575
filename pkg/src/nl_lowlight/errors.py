"""Exception taxonomy shared by all modules.

The CLI maps these onto exit codes: argument/validation/dimension
problems exit 1, numeric/internal problems exit 2.
"""


class DimensionError(ValueError):
    """Shapes disagree with an operation's contract."""


class ArgumentError(ValueError):
    """A value-level precondition failed (empty dir, bad range, ...)."""


class ValidationError(ValueError):
    """An input file or record is malformed or inconsistent."""


class NumericError(ArithmeticError):
    """A computation produced non-finite or otherwise unusable numbers."""


class ContractError(RuntimeError):
    """An API was driven outside its documented calling protocol."""
