"""Exception hierarchy shared by every module of the package."""


class DumpyError(Exception):
    """Base class for all errors raised by this package."""


class InvalidArgumentError(DumpyError, ValueError):
    pass


class FormatError(DumpyError, ValueError):
    """An on-disk artifact is corrupt, truncated or from another version."""


class StorageError(DumpyError, OSError):
    pass


class CannotSplitError(DumpyError):
    """Every segment of a node is already at full bit depth."""


class InternalError(DumpyError, RuntimeError):
    """An invariant of the index structure was violated."""
