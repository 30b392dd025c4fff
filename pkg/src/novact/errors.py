"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: input problems -> 2, numeric failures
during training/scoring -> 3, violated internal contracts -> 4.
"""


class NovactError(Exception):
    """Base class for all package errors."""


class InputError(NovactError):
    """Bad user input: files, records, or configuration."""


class ParseError(InputError):
    """A record could not be parsed; message carries file/line position."""


class SchemaError(InputError):
    """Records disagree on structure (e.g. channel count)."""


class ConfigError(InputError):
    """Invalid configuration or parameter values."""


class LengthError(InputError):
    """Episode length exceeds the requested padded length."""


class NumericError(NovactError):
    """Non-finite values or numeric divergence."""


class TrainingDiverged(NumericError):
    """Training hit a non-finite loss.

    Carries the last finite-loss parameters so callers can checkpoint them.
    """

    def __init__(self, message, last_good=None, epoch=None):
        super().__init__(message)
        self.last_good = last_good
        self.epoch = epoch


class InvariantError(NovactError):
    """A declared invariant did not hold."""


class ContractError(InvariantError):
    """A caller violated a function precondition."""


class RunningStatsError(InvariantError):
    """Eval-mode normalization requested before any train-mode update."""
