"""Row-sparse compression of channel measurements: greedy, thresholding, proximal and unrolled AMP solvers."""

from .errors import ConfigError, DegenerateInputError, FormatError, ParameterError, SolverError
from .model import SensingMatrix, build_sensing_matrix

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "DegenerateInputError",
    "FormatError",
    "ParameterError",
    "SolverError",
    "SensingMatrix",
    "build_sensing_matrix",
]
