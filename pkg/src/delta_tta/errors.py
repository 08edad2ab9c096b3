"""Exception hierarchy shared by every module."""


class DeltaError(Exception):
    """Base class; `kind` is echoed in machine-readable CLI error records."""

    kind = "error"


class ConfigError(DeltaError, ValueError):
    kind = "config"


class InputError(DeltaError, ValueError):
    kind = "input"


class ContractError(DeltaError, RuntimeError):
    kind = "contract"


class StateError(DeltaError, RuntimeError):
    kind = "state"


class NumericError(DeltaError, FloatingPointError):
    kind = "numeric"
