"""Exception types shared across the package.

The CLI maps these onto its exit-code contract: ConfigError -> 2,
NumericalError -> 3. Everything else is a bug and propagates.
"""


class FlowMIError(Exception):
    """Base class for errors raised by this package."""


class ConfigError(FlowMIError, ValueError):
    """Invalid configuration or arguments (bad field, unknown key, bad range)."""


class NumericalError(FlowMIError, RuntimeError):
    """Numerical failure: divergence, non-finite values, non-convergence."""
