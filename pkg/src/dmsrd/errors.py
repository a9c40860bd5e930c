"""Exception hierarchy shared by every module.

The CLI maps these onto exit codes, so new error types should subclass one
of the four roots below.
"""


class DMSRDError(Exception):
    """Base class for all package errors."""


class ConfigError(DMSRDError, ValueError):
    """Bad configuration: unknown ids, unknown keys, invalid values."""


class ContractError(DMSRDError, ValueError):
    """A caller violated a function contract (shapes, lengths, empty input)."""


class PreconditionError(ContractError):
    """An operation was invoked in a state where it is not defined."""


class NumericalError(DMSRDError, ArithmeticError):
    """Non-finite values or an undefined numerical quantity."""


class TrainingError(NumericalError):
    """Training diverged; carries the loss trace for diagnostics."""

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = list(trace or [])


class IntegrityError(DMSRDError):
    """Corrupt or inconsistent persisted state."""

    def __init__(self, message, path=None):
        super().__init__(message if path is None else f"{message}: {path}")
        self.path = path


class RegistryIntegrityError(IntegrityError):
    """The strategy registry is missing data it guarantees to hold."""


class LookupFailure(DMSRDError, KeyError):
    """A requested record (demo index, strategy, registry) does not exist."""

    def __str__(self):
        return str(self.args[0]) if self.args else ""
