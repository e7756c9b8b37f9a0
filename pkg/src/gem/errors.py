"""Error taxonomy shared by every module; the CLI maps classes to exit codes."""


class GemError(Exception):
    """Base class for all package errors."""


class ConfigError(GemError):
    """Invalid configuration value or file (CLI exit code 2)."""


class DataError(GemError):
    """Bad or inconsistent data artifact (CLI exit code 3)."""


class ShapeError(DataError):
    """Operands or artifacts with incompatible dimensions."""


class DomainError(DataError):
    """Numeric-domain violation (log of non-positive, non-finite result)."""


class ScoringParseError(DataError):
    """A scorer reply that could not be parsed; carries the reply text."""

    def __init__(self, message: str, reply: str = ""):
        super().__init__(message)
        self.reply = reply


class TransportError(GemError):
    """Remote scoring transport failure (CLI exit code 4)."""


class CredentialError(TransportError):
    """Authentication failure against the remote scoring endpoint."""


class DivergenceError(GemError):
    """Training produced a non-finite loss (CLI exit code 5)."""

    def __init__(self, message: str, step: int):
        super().__init__(f"{message} (step {step})")
        self.step = step
