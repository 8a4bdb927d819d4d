"""Exception types raised across the package."""


class ParameterError(ValueError):
    """Invalid argument value or incompatible shapes."""


class DegenerateInputError(ValueError):
    """Input for which the requested operation is undefined (e.g. a zero matrix)."""


class SolverError(RuntimeError):
    """Numerical breakdown inside an iterative solver or during training."""


class FormatError(ValueError):
    """Malformed CMPX or LMP1 file."""


class ConfigError(ValueError):
    """Invalid or incomplete experiment configuration."""
