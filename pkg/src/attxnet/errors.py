"""Exception types shared across the package."""


class ConfigurationError(ValueError):
    """Invalid shapes, parameters or experiment configuration."""


class NumericalError(RuntimeError):
    """Non-finite values appeared during computation."""


class ArchiveError(ValueError):
    """A segment archive or checkpoint could not be read.

    ``code`` distinguishes the failure kind so callers can branch on it.
    """

    BAD_MAGIC = "bad-magic"
    VERSION = "version-mismatch"
    TRUNCATED = "truncated"
    INVARIANT = "invariant-violation"

    def __init__(self, code: str, message: str):
        super().__init__(message)
        self.code = code
