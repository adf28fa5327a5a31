from .core.config import ConfigManager, ProblemConfig, RunConfig, StudyConfig, build_problem
from .core.errors import (
    BetaSearchError,
    ConfigError,
    ConfigValidationError,
    IrgnmError,
    IterationError,
    StateSolveError,
    SubproblemError,
)
from .core.irgnm import RunReport, run, validate_config
from .core.mesh import Mesh1D, uniform_mesh
from .core.problem import CoefficientProblem, DenseLinearProblem, InverseProblem
from .core.regparam import BetaSearchConfig, select_beta

__version__ = "0.1.0"

__all__ = [
    "BetaSearchConfig",
    "BetaSearchError",
    "CoefficientProblem",
    "ConfigError",
    "ConfigManager",
    "ConfigValidationError",
    "DenseLinearProblem",
    "InverseProblem",
    "IrgnmError",
    "IterationError",
    "Mesh1D",
    "ProblemConfig",
    "RunConfig",
    "RunReport",
    "StateSolveError",
    "StudyConfig",
    "SubproblemError",
    "build_problem",
    "run",
    "select_beta",
    "uniform_mesh",
    "validate_config",
]
