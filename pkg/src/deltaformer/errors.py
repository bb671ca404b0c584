"""Exception hierarchy shared by every module.

Each class carries a ``category`` used by the CLI to report a
machine-readable error kind and pick an exit code.
"""


class DeltaError(Exception):
    category = "error"
    exit_code = 1


class ConfigurationError(DeltaError, ValueError):
    category = "configuration"
    exit_code = 3


class ShapeError(DeltaError, ValueError):
    category = "shape"
    exit_code = 3


class ContractError(DeltaError, RuntimeError):
    category = "contract"
    exit_code = 3


class IngestionError(DeltaError, ValueError):
    category = "ingestion"
    exit_code = 4

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class NumericError(DeltaError, FloatingPointError):
    category = "numeric"
    exit_code = 6


class ResourceError(DeltaError, MemoryError):
    category = "resource"
    exit_code = 5


class ReportIOError(DeltaError, OSError):
    category = "io"
    exit_code = 7
