"""Exception taxonomy shared across the package.

``ValueError`` is reserved for misuse of pure functions (bad shapes, invalid
arguments); subclasses of :class:`SaersError` cover everything that can go
wrong with external data and are mapped to CLI exit codes.
"""


class SaersError(Exception):
    """Base class for all package-level errors."""


class DataError(SaersError):
    """Invalid or inconsistent input data (files, manifests, datasets)."""


class TensorFormatError(DataError):
    """Malformed ``.sat`` tensor file."""


class CheckpointError(DataError):
    """Unreadable or inconsistent model checkpoint."""
