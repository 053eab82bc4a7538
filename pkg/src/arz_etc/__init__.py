"""Event-triggered backstepping boundary control of mixed-autonomy ARZ traffic."""

from .estimators import BacksteppingTransformer
from .etc import EtcParams, validate_etc_params
from .exceptions import (
    ArzEtcError,
    CalibrationError,
    ConfigError,
    DivergenceError,
    DomainError,
    GridMismatchError,
    InfeasibleEquilibriumError,
    InvariantViolation,
    KernelSolverError,
    ModelError,
    StabilityError,
)
from .harness import ScenarioConfig, load_config, run_scenario, run_sweep
from .kernels import KernelSet, solve_kernels
from .metrics import MetricsReport, compute_metrics
from .model import (
    Equilibrium,
    LinearizedSystem,
    ModelParams,
    compute_equilibrium,
    linearize,
    paper_params,
)
from .sim import GridSpec, SimState, Trajectory, make_grid

__version__ = "0.1.0"

__all__ = [
    "ArzEtcError", "BacksteppingTransformer", "CalibrationError", "ConfigError", "DivergenceError",
    "DomainError", "Equilibrium", "EtcParams", "GridMismatchError", "GridSpec",
    "InfeasibleEquilibriumError", "InvariantViolation", "KernelSet", "KernelSolverError",
    "LinearizedSystem", "MetricsReport", "ModelError", "ModelParams", "ScenarioConfig", "SimState",
    "StabilityError", "Trajectory", "compute_equilibrium", "compute_metrics", "linearize", "load_config",
    "make_grid", "paper_params", "run_scenario", "run_sweep", "solve_kernels", "validate_etc_params",
]
