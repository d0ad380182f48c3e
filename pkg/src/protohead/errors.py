"""Exception types shared across the package.

The CLI maps these onto exit codes: usage problems are argparse's job,
DataFormatError covers anything wrong with files on disk, and
NumericalError covers non-finite losses/gradients and failed checks.
"""


class DataFormatError(ValueError):
    """A file on disk does not conform to its declared format."""


class NumericalError(RuntimeError):
    """A computation produced non-finite values or failed a consistency check."""
