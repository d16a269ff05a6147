"""Two-stage frequency power flow and event replay.

A timeline starts with a conventional base solve (frequency pinned at
nominal, slack absorbing the mismatch), then for every event solves the
post-primary steady state and the post-secondary steady state in turn,
warm-starting each solve from the previous one.
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field, replace

from .control import compute_ace, secondary_setpoints
from .network import (
    NetworkCase,
    Status,
    ValidationError,
    _islands,
    to_per_unit,
    validate,
)
from .solver import (
    SolveReport,
    SolverOptions,
    SolverState,
    flat_start,
    generator_dispatch,
    nr_solve,
)

__all__ = [
    "BranchOutage",
    "ConvergenceError",
    "EventError",
    "GeneratorOutage",
    "IslandingError",
    "LoadOverride",
    "LoadScale",
    "ReplaceCase",
    "StageLabel",
    "StageResult",
    "apply_event",
    "run_base",
    "run_stage1",
    "run_stage2",
    "run_timeline",
]

logger = logging.getLogger(__name__)


class StageLabel(str, enum.Enum):
    BASE = "base"
    PRIMARY = "primary"
    SECONDARY = "secondary"


class EventError(KeyError):
    pass


class IslandingError(ValidationError):
    def __init__(self, islands):
        self.islands = islands
        super().__init__(
            ["event islands bus set " + ", ".join(map(str, sorted(isl))) for isl in islands]
        )


class ConvergenceError(RuntimeError):
    def __init__(self, result: StageResult):
        self.result = result
        rep = result.report
        super().__init__(
            f"{result.label.value} solve did not converge in {rep.iterations} "
            f"iterations (residual {rep.final_residual_norm:.3e})"
        )


@dataclass
class StageResult:
    label: StageLabel
    cycle: int
    case: NetworkCase
    state: SolverState
    report: SolveReport
    secondary: dict[int, float]
    dispatch: dict[int, dict[str, float]]
    ace_by_area: dict = field(default_factory=dict)

    @property
    def df(self) -> float:
        return self.state.df

    @property
    def time_index(self) -> int:
        """1 for the base solve, then 2, 3 for the two stages of each cycle."""
        if self.label is StageLabel.BASE:
            return 1
        return 2 * self.cycle + (0 if self.label is StageLabel.PRIMARY else 1)

    @property
    def converged(self) -> bool:
        return self.report.converged

    @property
    def total_ace(self) -> float:
        return sum(m.ace for m in self.ace_by_area.values())


def _measure(case, result):
    return {a.id: compute_ace(a, result) for a in case.areas}


def _finish(label, cycle, case, state, report, secondary, opts):
    result = StageResult(
        label=label,
        cycle=cycle,
        case=case,
        state=state,
        report=report,
        secondary=dict(secondary),
        dispatch=generator_dispatch(case, state, secondary, opts.smoothing_hz),
    )
    if report.converged:
        result.ace_by_area = _measure(case, result)
    return result


def _prepare(case):
    case = to_per_unit(case)
    problems = validate(case)
    if problems:
        raise ValidationError(problems)
    return case


def run_base(case, initial=None, opts=None) -> StageResult:
    """Pre-disturbance solve: controls off, frequency pinned, slack absorbs."""
    opts = opts or SolverOptions()
    case = _prepare(case)
    initial = initial if initial is not None else flat_start(case)
    state, report = nr_solve(case, initial, {}, opts, pin_df=True)
    result = _finish(StageLabel.BASE, 0, case, state, report, {}, opts)
    if not report.converged:
        raise ConvergenceError(result)
    dispatched = _dispatch_from_base(case, state)
    return _finish(StageLabel.BASE, 0, dispatched, state, report, {}, opts)


def run_stage1(case, initial=None, opts=None, *, cycle=1) -> StageResult:
    """Post-primary steady state: droop only, no secondary injections."""
    opts = opts or SolverOptions()
    case = _prepare(case)
    initial = initial if initial is not None else flat_start(case)
    state, report = nr_solve(case, initial, {}, opts)
    result = _finish(StageLabel.PRIMARY, cycle, case, state, report, {}, opts)
    if not report.converged:
        raise ConvergenceError(result)
    return result


def run_stage2(case, stage1: StageResult, opts=None, *, initial=None) -> StageResult:
    """Post-secondary steady state.

    ACE is measured once on ``stage1`` and the resulting AGC injections are
    held fixed through this solve.
    """
    opts = opts or SolverOptions()
    case = _prepare(case if case is not None else stage1.case)
    if not stage1.converged:
        raise ValueError("stage 2 needs a converged stage-1 result")
    secondary = secondary_setpoints(case, _measure(case, stage1))
    start = initial if initial is not None else stage1.state
    state, report = nr_solve(case, start, secondary, opts)
    result = _finish(StageLabel.SECONDARY, stage1.cycle, case, state, report, secondary, opts)
    if not report.converged:
        raise ConvergenceError(result)
    return result


def _clamped_setpoints(case, new_p_set):
    gens = []
    for g in case.generators:
        if g.id not in new_p_set:
            gens.append(g)
            continue
        p = new_p_set[g.id]
        clipped = min(max(p, g.p_min), g.p_max)
        if clipped != p:
            logger.warning(
                "generator %s set point %.6g pu clipped to limits [%.6g, %.6g]",
                g.id, p, g.p_min, g.p_max,
            )
        gens.append(replace(g, p_set=clipped))
    return replace(case, generators=tuple(gens))


def _dispatch_from_base(case, state) -> NetworkCase:
    """Case whose slack generators are set to their base-case output."""
    slack_id = case.slack_bus.id
    at_slack = [g for g in case.in_service_generators() if g.bus_id == slack_id]
    v = state.voltages[state.index.slack]
    actual = (v * state.slack_current.conjugate()).real
    share = (actual - sum(g.p_set for g in at_slack)) / len(at_slack)
    return _clamped_setpoints(case, {g.id: g.p_set + share for g in at_slack})


def fold_secondary(result: StageResult) -> NetworkCase:
    """Case with achieved AGC injections absorbed into the set points."""
    new = {gid: result.case.generator(gid).p_set + ds
           for gid, ds in result.secondary.items() if ds != 0.0}
    return _clamped_setpoints(result.case, new)


@dataclass(frozen=True)
class GeneratorOutage:
    id: int


@dataclass(frozen=True)
class BranchOutage:
    id: int


@dataclass(frozen=True)
class LoadScale:
    factor: float


@dataclass(frozen=True)
class LoadOverride:
    """Replace one load's nominal powers (MW / MVAr)."""

    id: int
    p0: float
    q0: float | None = None


@dataclass(frozen=True)
class ReplaceCase:
    case: NetworkCase


def _set_status(items, item_id, kind):
    found = False
    out = []
    for it in items:
        if it.id == item_id:
            found = True
            it = replace(it, status=Status.OUT)
        out.append(it)
    if not found:
        raise EventError(f"no {kind} with id {item_id}")
    return tuple(out)


def apply_event(case: NetworkCase, event) -> NetworkCase:
    """Return the revalidated per-unit case after ``event``."""
    case = to_per_unit(case)
    if isinstance(event, GeneratorOutage):
        new = replace(case, generators=_set_status(case.generators, event.id, "generator"))
    elif isinstance(event, BranchOutage):
        new = replace(case, branches=_set_status(case.branches, event.id, "branch"))
        islands = _islands(new)
        if len(islands) > 1:
            islands.sort(key=len, reverse=True)
            raise IslandingError(islands[1:])
    elif isinstance(event, LoadScale):
        if event.factor == 1.0:
            return case
        loads = tuple(
            replace(ld, p0=ld.p0 * event.factor, q0=ld.q0 * event.factor)
            for ld in case.loads
        )
        new = replace(case, loads=loads)
    elif isinstance(event, LoadOverride):
        loads = []
        found = False
        for ld in case.loads:
            if ld.id == event.id:
                found = True
                q0 = ld.q0 if event.q0 is None else event.q0 / case.mva_base
                ld = replace(ld, p0=event.p0 / case.mva_base, q0=q0)
            loads.append(ld)
        if not found:
            raise EventError(f"no load with id {event.id}")
        new = replace(case, loads=tuple(loads))
    elif isinstance(event, ReplaceCase):
        new = to_per_unit(event.case)
    else:
        raise TypeError(f"unknown event {event!r}")
    problems = validate(new)
    if problems:
        raise ValidationError(problems)
    return new


def run_timeline(case, script=(), opts=None, *, secondary=True,
                 initial: SolverState | None = None) -> list[StageResult]:
    """Base solve followed by one primary/secondary cycle per event.

    If a solve fails to converge the timeline stops and the failing result
    (``converged`` false) is the last entry of the returned list.
    """
    opts = opts or SolverOptions()
    results: list[StageResult] = []
    try:
        base = run_base(case, initial, opts)
    except ConvergenceError as exc:
        return [exc.result]
    results.append(base)
    current = base.case
    state = base.state
    for cycle, event in enumerate(script, start=1):
        current = apply_event(current, event)
        try:
            s1 = run_stage1(current, state, opts, cycle=cycle)
        except ConvergenceError as exc:
            results.append(exc.result)
            return results
        results.append(s1)
        state = s1.state
        if not secondary:
            continue
        try:
            s2 = run_stage2(current, s1, opts)
        except ConvergenceError as exc:
            results.append(exc.result)
            return results
        results.append(s2)
        state = s2.state
        current = fold_secondary(s2)
    return results
