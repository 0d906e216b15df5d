"""Mean-field analysis of large bike sharing systems in a Markovian environment."""

__version__ = "0.1.0"

from .env import DaySegmentation, EnvironmentSpec, RateProfile, build_cyclic_generator, stationary_vector  # noqa: E402
from .generator import AssemblyMode, assemble  # noqa: E402
from .measures import PerformanceReport, efficiency_ratio, performance  # noqa: E402
from .meanfield import integrate, steady_state_by_integration  # noqa: E402
from .qbd import SolverOptions, linear_qbd_solve, rg_factorize, solve_fixed_point  # noqa: E402
from .rates import ModelParams  # noqa: E402

__all__ = [
    "AssemblyMode",
    "DaySegmentation",
    "EnvironmentSpec",
    "ModelParams",
    "PerformanceReport",
    "RateProfile",
    "SolverOptions",
    "assemble",
    "build_cyclic_generator",
    "efficiency_ratio",
    "integrate",
    "linear_qbd_solve",
    "performance",
    "rg_factorize",
    "solve_fixed_point",
    "stationary_vector",
    "steady_state_by_integration",
]
