class DawpError(Exception):
    """Base class for every error raised by the pipeline."""

    exit_code = 1


class ArgumentError(DawpError, ValueError):
    """Invalid argument: bad coordinates, shapes, or values."""

    exit_code = 2


class ConfigError(DawpError):
    exit_code = 3


class FormatError(DawpError):
    """Malformed file. `offset` is the byte position where parsing failed."""

    exit_code = 4

    def __init__(self, message: str, offset: int = 0, path: str = ""):
        self.offset = offset
        self.path = path
        where = f"{path} " if path else ""
        super().__init__(f"{where}at byte {offset}: {message}")


class StatisticsError(DawpError):
    exit_code = 5


class ContractError(DawpError):
    """A pre- or postcondition of an operation does not hold."""

    exit_code = 5


class InsufficientObservations(ContractError):
    """Raised by AIDA packing when a window has fewer observed tokens than the keep budget."""


class NumericError(DawpError):
    exit_code = 5
