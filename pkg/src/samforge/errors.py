"""Exception hierarchy shared by every samforge module."""


class SamforgeError(Exception):
    """Base class for data errors (CLI exit code 1)."""


class FormatError(SamforgeError, ValueError):
    """An input file or in-memory record violates its format contract."""


class BadMagicError(FormatError):
    pass


class TruncatedFileError(FormatError):
    pass


class ModelValidationError(FormatError):
    """A persisted model breaks an eigen-decomposition invariant."""


class DegenerateTriangleError(SamforgeError, ValueError):
    def __init__(self, message, triangle=None):
        super().__init__(message)
        self.triangle = triangle
