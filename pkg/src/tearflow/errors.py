"""Exception taxonomy shared across the package.

The CLI maps these onto exit codes: usage problems exit 1, DataError
(files, formats, malformed inputs) exits 2, NumericError (non-finite
values) exits 3. Contract violations inside the numeric core raise
plain ValueError.
"""


class DataError(Exception):
    """A file or record does not satisfy its documented format."""


class NumericError(Exception):
    """A computation produced non-finite values."""
