"""Exception taxonomy shared across the package.

The CLI maps these onto process exit codes, so new failure modes should
reuse one of these classes rather than raising bare ValueError/RuntimeError.
"""


class RmoeError(Exception):
    """Base class for all package-specific errors."""


class DimensionError(RmoeError, ValueError):
    """Tensor shapes do not satisfy an operation's contract."""


class InputError(RmoeError, ValueError):
    """Input values are out of the documented range (e.g. bad labels)."""


class ConfigError(RmoeError, ValueError):
    """A configuration value or combination is invalid."""


class StateError(RmoeError, RuntimeError):
    """An operation was applied to a model/checkpoint in the wrong stage."""


class ContractError(RmoeError, RuntimeError):
    """An API contract was violated (e.g. backward on a non-scalar)."""


class DegenerateError(RmoeError, RuntimeError):
    """Numerically degenerate input: zero-mean importance, zero-variance cloud."""


class RoutingUnstableError(RmoeError, RuntimeError):
    """Every probed coordinate flipped a routing decision during a gradient check."""


class DataError(RmoeError, ValueError):
    """Logged data required by an exporter is missing or inconsistent."""
