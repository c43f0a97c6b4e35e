"""Exception types shared across memlab."""


class MemlabError(Exception):
    pass


class ValidationError(MemlabError, ValueError):
    """Bad shapes, extents, or configuration values."""


class NumericInputError(MemlabError, ArithmeticError):
    """NaN (or otherwise unusable) numbers reached an operation."""


class UsageError(MemlabError, RuntimeError):
    """An object was used in a state that does not allow it (e.g. closed ledger)."""


class IntegrityError(MemlabError, RuntimeError):
    """Allocation events do not balance."""


class InvariantViolation(MemlabError, AssertionError):
    """An internal invariant that should be impossible to break was broken."""
