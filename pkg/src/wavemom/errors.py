"""Exception hierarchy shared across the package.

The CLI maps these onto process exit codes (validation 2, numerical 3,
I/O and data 4), so library code should raise the most specific type.
"""


class WavemomError(Exception):
    """Base class for all package errors."""


class SpecValidationError(WavemomError):
    """A model specification or option set violates a structural rule."""


class NumericalError(WavemomError):
    """An estimation step failed numerically (non-convergence, singularity)."""


class DataError(WavemomError):
    """Input data is malformed: ragged rows, missing or non-numeric cells."""
