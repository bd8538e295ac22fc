"""Exception hierarchy shared across the package."""


class DeepPursuitError(Exception):
    """Base class for all package errors."""


class DimensionError(DeepPursuitError, ValueError):
    """Operand shapes are incompatible."""


class GraphError(DeepPursuitError):
    """Malformed differentiation graph (non-scalar root, cycle)."""


class TopologyError(DeepPursuitError, ValueError):
    """A network topology is invalid or unsupported by the requested algorithm."""


class OperatorTooLargeError(DeepPursuitError):
    """Explicit materialization would exceed the size guard."""


class CheckpointError(DeepPursuitError):
    """Checkpoint file is malformed, truncated or incompatible."""


class ConfigError(DeepPursuitError, ValueError):
    """Experiment configuration is invalid."""


class DataError(DeepPursuitError):
    """Dataset files are missing or malformed."""


class NumericIncident(DeepPursuitError, ArithmeticError):
    """Non-finite values encountered during a numeric routine."""
