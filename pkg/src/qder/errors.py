"""Exception types shared across the engine.

The CLI maps these onto its exit-code contract: data/validation problems
exit 1, I/O problems (plain OSError) exit 2, numeric failures exit 3.
"""


class QderError(Exception):
    """Base class for engine errors."""


class DataFormatError(QderError):
    """A file or record does not conform to one of the on-disk formats.

    Messages carry ``path:line`` (or a byte offset for the packed format)
    so problems can be located without a debugger.
    """


class NumericError(QderError):
    """A computation produced or received a non-finite value."""
