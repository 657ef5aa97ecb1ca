"""
Exception hierarchy and process exit codes shared by every module.
"""

EXIT_OK = 0
EXIT_VERIFY_FAILED = 1
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_INTERRUPTED = 130  # SIGINT convention


class MBDPError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(MBDPError):
    """Invalid configuration. `problems` holds one message per offending field."""

    def __init__(self, problems):
        if isinstance(problems, str):
            problems = [problems]
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


class NumericError(MBDPError):
    """Non-finite value encountered. `where` names the layer or stage."""

    def __init__(self, message, where=None):
        self.where = where
        super().__init__(f"{where}: {message}" if where else message)


class InsufficientDataError(MBDPError):
    pass


class StaleBiasError(MBDPError):
    pass


class EnumerationCapError(MBDPError):
    def __init__(self, required, cap):
        self.required = required
        self.cap = cap
        super().__init__(f"trajectory enumeration needs {required:,} paths, cap is {cap:,}")


class CheckpointError(MBDPError):
    pass


class OutputDirError(MBDPError):
    pass


class TrainingAborted(MBDPError):
    """Wraps the original error with the epoch and stage it happened in."""

    def __init__(self, epoch, stage, cause):
        self.epoch = epoch
        self.stage = stage
        self.cause = cause
        super().__init__(f"epoch {epoch}, stage '{stage}': {cause}")


def exit_code_for(exc):
    """Map an exception to the documented process exit code."""
    if isinstance(exc, TrainingAborted):
        exc = exc.cause
    if isinstance(exc, (ConfigError, OutputDirError)):
        return EXIT_CONFIG
    if isinstance(exc, NumericError):
        return EXIT_NUMERIC
    return EXIT_VERIFY_FAILED
