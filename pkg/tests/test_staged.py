from dataclasses import replace

import numpy as np
import pytest

from conftest import make_twobus
from freqpf.network import Bus, BusKind, Branch, ValidationError, to_per_unit
from freqpf.solver import SolverOptions, flat_start, nr_solve
from freqpf.staged import (
    BranchOutage,
    ConvergenceError,
    EventError,
    GeneratorOutage,
    IslandingError,
    LoadOverride,
    LoadScale,
    ReplaceCase,
    StageLabel,
    apply_event,
    fold_secondary,
    run_base,
    run_stage1,
    run_stage2,
    run_timeline,
)
from freqpf.synthetic import calibrate, synthetic_case

MVA = 100.0


def test_base_solve_pins_frequency(twobus):
    base = run_base(twobus)
    assert base.label is StageLabel.BASE
    assert base.time_index == 1
    assert base.df == 0.0
    # the slack unit is re-dispatched to carry the whole load
    assert base.case.generator(1).p_set == pytest.approx(1.5, abs=1e-9)
    assert base.dispatch[1]["p_total"] == pytest.approx(1.5, abs=1e-9)


def test_stage1_twobus(twobus):
    s1 = run_stage1(twobus)
    assert s1.converged
    assert s1.df == pytest.approx(-0.5, abs=1e-9)
    assert s1.time_index == 2
    assert s1.secondary == {}
    d = s1.dispatch[1]
    assert d["dp_primary"] * MVA == pytest.approx(50.0, abs=1e-6)
    assert s1.ace_by_area[1].ace * MVA == pytest.approx(50.0, abs=1e-6)


def test_stage2_twobus_restores_frequency(twobus):
    s1 = run_stage1(twobus)
    s2 = run_stage2(None, s1)
    assert s2.label is StageLabel.SECONDARY
    assert s2.time_index == 3
    assert s2.secondary[1] * MVA == pytest.approx(50.0, abs=1e-6)
    assert abs(s2.df) < 1e-8
    assert abs(s2.total_ace) < 1e-6


def test_stage1_is_pure(twobus):
    a = run_stage1(twobus)
    b = run_stage1(twobus)
    np.testing.assert_array_equal(a.state.x, b.state.x)
    assert a.report.history == b.report.history


def test_secondary_is_frozen_from_stage1(twobus):
    s1 = run_stage1(twobus)
    s2 = run_stage2(None, s1)
    expected = s1.case.generator(1).kappa * s1.ace_by_area[1].ace
    assert s2.secondary[1] == expected


def test_dispatch_bookkeeping(twobus):
    s2 = run_stage2(None, run_stage1(twobus))
    for gid, d in s2.dispatch.items():
        assert d["p_total"] == pytest.approx(
            d["p_set"] + d["dp_primary"] + d["dp_secondary"], abs=1e-14
        )


def test_stage2_rejects_unconverged(twobus):
    s1 = run_stage1(twobus)
    bad = replace(s1, report=replace(s1.report, converged=False))
    with pytest.raises(ValueError):
        run_stage2(None, bad)


def test_convergence_error_carries_result(twobus):
    with pytest.raises(ConvergenceError) as info:
        run_stage1(twobus, opts=SolverOptions(max_iter=1))
    assert not info.value.result.converged


def test_timeline_load_step(twobus):
    res = run_timeline(twobus, [LoadScale(1.5)])
    assert [r.time_index for r in res] == [1, 2, 3]
    assert [r.label for r in res] == [StageLabel.BASE, StageLabel.PRIMARY, StageLabel.SECONDARY]
    assert res[0].df == 0.0
    assert res[1].df == pytest.approx(-0.75, abs=1e-8)
    assert abs(res[2].df) < 1e-8


def test_timeline_without_secondary(twobus):
    res = run_timeline(twobus, [LoadScale(1.5), LoadScale(1.0)], secondary=False)
    assert [r.time_index for r in res] == [1, 2, 4]
    # no AGC: the second (null) event leaves the frequency where it was
    assert res[2].df == pytest.approx(res[1].df, abs=1e-9)


def test_timeline_two_cycles(twobus):
    res = run_timeline(twobus, [LoadScale(1.5), LoadOverride(1, 300.0)])
    assert [r.time_index for r in res] == [1, 2, 3, 4, 5]
    # secondary from cycle 1 persists in the set point, so cycle 2 starts balanced
    assert res[3].case.generator(1).p_set == pytest.approx(2.25, abs=1e-8)
    assert res[3].df == pytest.approx(-0.75, abs=1e-8)
    assert abs(res[4].df) < 1e-8


def test_timeline_stops_at_nonconvergence(twobus):
    res = run_timeline(twobus, [LoadScale(1.5)], SolverOptions(max_iter=3))
    assert not res[-1].converged
    assert all(r.converged for r in res[:-1])


def test_warm_start_needs_fewer_iterations():
    case = calibrate(synthetic_case(200, seed=2))
    stepped = apply_event(case, LoadScale(1.03))
    base = run_base(case)
    warm = run_stage1(stepped, base.state)
    cold = run_stage1(stepped)
    assert warm.report.iterations <= cold.report.iterations
    assert warm.df == pytest.approx(cold.df, abs=1e-7)


def test_generator_outage_event(twobus):
    case = replace(twobus, generators=twobus.generators + (
        replace(twobus.generators[0], id=2, agc=False, kappa=0.0),))
    out = apply_event(case, GeneratorOutage(2))
    assert len(out.in_service_generators()) == 1


def test_slack_generator_outage_is_invalid(twobus):
    with pytest.raises(ValidationError, match="no in-service generator"):
        apply_event(twobus, GeneratorOutage(1))


def test_missing_id(twobus):
    with pytest.raises(EventError):
        apply_event(twobus, GeneratorOutage(42))
    with pytest.raises(EventError):
        apply_event(twobus, LoadOverride(42, 1.0))


def test_islanding_names_the_bus_set(twobus):
    case = replace(
        twobus,
        buses=twobus.buses + (Bus(3, 230.0, BusKind.PQ, 1), Bus(4, 230.0, BusKind.PQ, 1)),
        branches=twobus.branches + (Branch(2, 2, 3, 0.0, 0.1), Branch(3, 3, 4, 0.0, 0.1)),
    )
    with pytest.raises(IslandingError) as info:
        apply_event(case, BranchOutage(2))
    assert "3" in str(info.value) and "4" in str(info.value)


def test_unit_load_scale_is_identity(twobus):
    assert apply_event(twobus, LoadScale(1.0)) is twobus


def test_load_override_is_in_mw(twobus):
    out = apply_event(twobus, LoadOverride(1, 120.0, 30.0))
    assert out.loads[0].p0 == pytest.approx(1.2)
    assert out.loads[0].q0 == pytest.approx(0.3)


def test_replace_case(twobus):
    other = make_twobus(load_mw=90.0)
    out = apply_event(twobus, ReplaceCase(other))
    assert out == to_per_unit(other)


def test_fold_secondary_clips(twobus, caplog):
    case = replace(twobus, generators=(replace(twobus.generators[0], p_max=1.6),))
    s1 = run_stage1(case)
    s2 = replace(s1, secondary={1: 0.8})
    folded = fold_secondary(s2)
    assert folded.generator(1).p_set == 1.6
    assert "clipped" in caplog.text


def test_stage1_accepts_physical_units():
    s1 = run_stage1(make_twobus())
    assert s1.df == pytest.approx(-0.5, abs=1e-9)


def test_stage1_matches_direct_solve(twobus):
    s1 = run_stage1(twobus)
    st, _ = nr_solve(twobus, flat_start(twobus))
    np.testing.assert_array_equal(s1.state.x, st.x)
