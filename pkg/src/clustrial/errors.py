"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class ClustrialError(Exception):
    exit_code = 1
    code = "error"


class ConfigError(ClustrialError, ValueError):
    exit_code = 2
    code = "config_error"


class DataError(ClustrialError, ValueError):
    exit_code = 3
    code = "data_error"

    def __init__(self, message, row=None):
        if row is not None:
            message = f"row {row}: {message}"
        super().__init__(message)
        self.row = row


class ModelError(ClustrialError, RuntimeError):
    """A model could not be fitted (singular system, failed inner mode, ...)."""

    exit_code = 3
    code = "model_error"


class FailureFractionExceeded(ClustrialError):
    exit_code = 4
    code = "failure_fraction_exceeded"
