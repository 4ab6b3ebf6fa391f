"""Schedule-aware freeze-ratio planning for pipeline-parallel training."""

from .dag import PipelineDag, build_dag, longest_path_start_times, validate_dag
from .errors import (
    ConfigError,
    ConsistencyError,
    DomainError,
    NumericalFailureError,
    PipefreezeError,
)
from .freezectl import Phase, PhasePlan, actual_freeze_ratio, phase_of
from .lp import FreezePlan, build_lp, grid_search, optimize_freeze_plan, solve_lp, verify_solution
from .schedule import ActionId, PipelineConfig, ScheduleKind, build_schedule, bwd, fwd
from .timing import StageTiming, TimingProfile

__version__ = "0.1.0"

__all__ = [
    "ActionId", "ConfigError", "ConsistencyError", "DomainError", "FreezePlan", "NumericalFailureError",
    "Phase", "PhasePlan", "PipefreezeError", "PipelineConfig", "PipelineDag", "ScheduleKind", "StageTiming",
    "TimingProfile", "actual_freeze_ratio", "build_dag", "build_lp", "build_schedule", "bwd", "fwd",
    "grid_search", "longest_path_start_times", "optimize_freeze_plan", "phase_of", "solve_lp",
    "validate_dag", "verify_solution",
]
