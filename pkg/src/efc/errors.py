"""Exception hierarchy.

Every error raised on purpose by the package derives from ``EFCError``.
``exit_code`` is what the CLI returns when the error escapes a subcommand:
1 for validation failures, 2 for I/O and configuration problems.
"""


class EFCError(Exception):
    exit_code = 1


class ValidationError(EFCError, ValueError):
    """Input data or parameters violate a precondition."""


class ConfigError(EFCError):
    """Bad profile, sidecar or flag combination."""

    exit_code = 2


class DataFileError(EFCError):
    """A file could not be read or written."""

    exit_code = 2


class SingularCovarianceError(ValidationError):
    """The class covariance matrix could not be inverted, even with a ridge."""


class ModelFormatError(EFCError):
    """A model file failed validation on load.

    ``field`` names the header entry or section that did not check out.
    """

    exit_code = 2

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field
