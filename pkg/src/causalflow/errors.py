"""Exception hierarchy shared across the package."""


class CausalFlowError(Exception):
    """Base class for all package errors."""


class ConfigError(CausalFlowError):
    """Bad user input: malformed files, invalid options, schema violations."""


class ContractError(CausalFlowError):
    """Programming error: an internal API was called with inconsistent state."""


class TrainingAbort(CausalFlowError):
    """Optimization produced non-finite values and cannot continue."""


class SamplingError(CausalFlowError):
    """A rejection/sampling routine exhausted its attempt budget."""


class OutOfSupportError(CausalFlowError):
    """A query point failed the support gate and the caller did not override."""
