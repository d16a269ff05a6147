"""Frequency-dependent power flow with implicit primary and secondary control."""

from importlib import resources

from .control import (
    AceMeasurement,
    SmoothDroopModel,
    build_droop_model,
    compute_ace,
    eval_primary,
    eval_primary_derivative,
    scaled_load,
    secondary_setpoints,
)
from .network import (
    Area,
    Branch,
    Bus,
    BusKind,
    Generator,
    Load,
    NetworkCase,
    Status,
    ValidationError,
    to_per_unit,
    to_physical,
    validate,
)
from .solver import (
    SolveReport,
    SolverOptions,
    SolverState,
    assemble_jacobian,
    assemble_residuals,
    flat_start,
    nr_solve,
)
from .staged import (
    BranchOutage,
    GeneratorOutage,
    LoadOverride,
    LoadScale,
    ReplaceCase,
    StageResult,
    apply_event,
    run_base,
    run_stage1,
    run_stage2,
    run_timeline,
)
from .caseio import import_matpower, parse_case, parse_events
from .estimator import FrequencyPowerFlow, check_case

__version__ = "0.1.0"


def data_path(name: str):
    """Path of a bundled example case (``twobus.json``, ``case9.m``)."""
    return resources.files(__name__) / "data" / name
