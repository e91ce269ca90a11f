"""Exception types shared across the package.

``DataError`` covers everything a CLI run should report as a data problem
(exit code 2), as opposed to usage errors (exit code 1).
"""


class DataError(Exception):
    """Input data is malformed or inconsistent."""


class FormatError(DataError):
    """A file does not conform to its declared on-disk format."""


class UnsupportedError(DataError):
    """The file is valid but uses a feature outside the supported subset."""
