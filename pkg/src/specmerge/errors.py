"""Exception types shared across the toolkit.

Error classes map onto the CLI exit-code contract: format/validation/shape
problems exit with code 1, numerical failures with code 2.
"""


class FormatError(Exception):
    """Interchange file is structurally malformed (bad header, bad offsets)."""


class TruncatedDataError(OSError):
    """Interchange data block is shorter than the header declares."""


class ValidationError(Exception):
    """A tensor violates a content invariant (non-finite values, bad dtype)."""


class ShapeError(ValueError):
    """Key sets or tensor shapes disagree between operands."""


class DegenerateSpectrumError(ValueError):
    """Singular-value vector is all zero; the rank rule is undefined."""


class NumericalError(Exception):
    """A numerical routine failed to converge or produced an invalid result."""
