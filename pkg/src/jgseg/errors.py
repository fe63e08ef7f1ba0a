"""Exception hierarchy shared by every jgseg module."""


class JGSegError(Exception):
    """Base class for all package errors."""

    exit_code = 4


class InvalidArgument(JGSegError, ValueError):
    pass


class UnsupportedSchema(JGSegError):
    pass


class CorruptCheckpoint(JGSegError):
    pass


class ContractViolation(JGSegError, RuntimeError):
    """A runtime check on a documented invariant failed (frozen nets, stop-gradient)."""


class ConfigError(JGSegError):
    exit_code = 2


class PreconditionError(JGSegError):
    exit_code = 3


class DivergedInversion(JGSegError):
    """Inversion produced a non-finite loss; ``trace`` holds the losses seen so far."""

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = list(trace or [])
