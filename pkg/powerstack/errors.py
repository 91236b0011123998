"""
Exception hierarchy for powerstack.

Input problems (bad config, bad traces, bad wire data) are kept apart from
domain failures so the CLI can map them onto distinct exit codes.
"""

from typing import Optional


class PowerStackError(Exception):
    """Base class for every error raised by powerstack."""


class ConfigError(PowerStackError):
    """Malformed or inconsistent cluster/run configuration."""

    def __init__(self, message: str, lineno: Optional[int] = None):
        self.lineno = lineno
        if lineno is not None:
            message = f"line {lineno}: {message}"
        super().__init__(message)


class WireFormatError(PowerStackError):
    """A power-sample payload or telemetry log line could not be parsed."""

    def __init__(self, message: str, offset: int):
        self.offset = offset
        super().__init__(f"byte {offset}: {message}")


class WorkloadError(PowerStackError):
    """Bad workload trace or workload inconsistent with the cluster."""

    def __init__(self, message: str, lineno: Optional[int] = None):
        self.lineno = lineno
        if lineno is not None:
            message = f"line {lineno}: {message}"
        super().__init__(message)


class HistoryFormatError(PowerStackError):
    """Malformed job-record or model CSV."""

    def __init__(self, message: str, row: Optional[int] = None):
        self.row = row
        if row is not None:
            message = f"row {row}: {message}"
        super().__init__(message)


class ManifestError(PowerStackError):
    """Run manifest missing fields or failing its tamper check."""


class TelemetryError(PowerStackError):
    pass


class BusError(PowerStackError):
    """Malformed topic or filter."""


class AccountingError(PowerStackError):
    pass


class PowerCapError(PowerStackError):
    pass


class SchedulerError(PowerStackError):
    pass


class PredictorError(PowerStackError):
    pass


class SimulationError(PowerStackError):
    pass


class TelemetryLogError(PowerStackError):
    """A recorded telemetry log line could not be replayed."""

    def __init__(self, message: str, lineno: int):
        self.lineno = lineno
        super().__init__(f"line {lineno}: {message}")


# Errors the CLI reports with exit code 2
INPUT_ERRORS = (
    ConfigError,
    TelemetryLogError,
    WireFormatError,
    WorkloadError,
    HistoryFormatError,
    ManifestError,
)
