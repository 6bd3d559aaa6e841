"""Run time assurance safety filters for spacecraft docking in Clohessy-Wiltshire dynamics."""
from rta_docking.dynamics import CwParameters, cw_matrices, step_euler, step_rk4
from rta_docking.filters import (
    BackupHorizon,
    FilterDecision,
    FilterDeps,
    FilterKind,
    LatchingFilter,
    make_filter,
)
from rta_docking.kernels import BACKEND
from rta_docking.safety import SafetyParameters, constraint_values, in_allowable
from rta_docking.sim import ScenarioConfig, default_config, run_benchmark, run_scenario

__version__ = "0.1.0"

__all__ = [
    "BACKEND", "BackupHorizon", "CwParameters", "FilterDecision", "FilterDeps", "FilterKind",
    "LatchingFilter", "SafetyParameters", "ScenarioConfig", "constraint_values", "cw_matrices",
    "default_config", "in_allowable", "make_filter", "run_benchmark", "run_scenario", "step_euler",
    "step_rk4",
]
