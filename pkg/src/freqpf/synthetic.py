"""Deterministic synthetic meshed grids for benchmarks and randomized tests."""

from __future__ import annotations

import math
from dataclasses import replace

import numpy as np

from .network import (
    Area,
    Branch,
    Bus,
    BusKind,
    Generator,
    Load,
    NetworkCase,
    to_per_unit,
)
from .control import interchange
from .solver import SolverOptions, flat_start, generator_dispatch, nr_solve

__all__ = ["calibrate", "synthetic_case"]


def synthetic_case(n_buses: int, seed: int = 0, *, n_areas: int | None = None,
                   gen_fraction: float = 0.2, mva_base: float = 100.0,
                   f_nominal: float = 60.0) -> NetworkCase:
    """Lattice grid with random chords, ZIP loads and droop/AGC generators.

    Buses sit on a near-square lattice; areas are horizontal bands. Each
    area's AGC participation factors sum to one and its frequency bias equals
    its natural response (droop plus load sensitivity). The returned case is
    per-unit; call :func:`calibrate` to set schedules from a base solve.
    """
    if n_buses < 2:
        raise ValueError("need at least two buses")
    rng = np.random.default_rng(seed)
    cols = math.ceil(math.sqrt(n_buses))
    rows = math.ceil(n_buses / cols)
    if n_areas is None:
        n_areas = max(1, min(4, n_buses // 40))
    n_areas = min(n_areas, rows)

    def area_of(i):
        return (i // cols) * n_areas // rows + 1

    edges = []
    for i in range(n_buses):
        if (i + 1) % cols and i + 1 < n_buses:
            edges.append((i, i + 1))
        if i + cols < n_buses:
            edges.append((i, i + cols))
    n_chords = n_buses // 8
    for i in rng.choice(n_buses, size=n_chords, replace=False):
        j = int(i) + cols + 1
        if j < n_buses and (int(i) + 1) % cols:
            edges.append((int(i), j))

    branches = []
    for k, (i, j) in enumerate(edges, start=1):
        r = rng.uniform(0.002, 0.008)
        x = r * rng.uniform(6.0, 10.0)
        if rng.random() < 0.05:
            branches.append(Branch(k, i + 1, j + 1, r, x, 0.0, rng.uniform(0.97, 1.03)))
        else:
            branches.append(Branch(k, i + 1, j + 1, r, x, rng.uniform(0.0, 0.04)))

    loads = []
    for i in range(n_buses):
        p0 = rng.uniform(5.0, 30.0)
        zp = tuple(rng.dirichlet([1.0, 1.0, 4.0]))
        zq = tuple(rng.dirichlet([1.0, 1.0, 4.0]))
        loads.append(Load(
            id=i + 1, bus_id=i + 1, p0=p0, q0=p0 * rng.uniform(0.1, 0.35),
            zip_p=_renorm(zp), zip_q=_renorm(zq),
            k_pf=rng.uniform(0.0, 0.02), k_qf=rng.uniform(0.0, 0.04),
        ))
    total_load = sum(ld.p0 for ld in loads)

    is_gen = rng.random(n_buses) < gen_fraction
    is_gen[0] = True
    for a in range(1, n_areas + 1):
        members = [i for i in range(n_buses) if area_of(i) == a]
        if sum(is_gen[members]) < 2:
            for i in rng.choice(members, size=min(2, len(members)), replace=False):
                is_gen[i] = True
    gen_buses = np.flatnonzero(is_gen)
    weight = rng.uniform(0.5, 1.5, size=len(gen_buses))
    p_max = 1.5 * total_load * weight / weight.sum()
    p_set = 1.02 * total_load * weight / weight.sum()
    agc = rng.random(len(gen_buses)) < 0.8

    kappa = np.zeros(len(gen_buses))
    for a in range(1, n_areas + 1):
        sel = np.array([area_of(i) == a for i in gen_buses])
        if not np.any(agc & sel):
            agc[np.flatnonzero(sel)[0]] = True
        pick = agc & sel
        kappa[pick] = p_max[pick] / p_max[pick].sum()

    gens = []
    for j, i in enumerate(gen_buses):
        gens.append(Generator(
            id=int(i) + 1, bus_id=int(i) + 1, p_set=float(p_set[j]),
            p_min=float(0.1 * p_max[j]), p_max=float(p_max[j]),
            droop_gain=float(p_max[j] / (0.05 * f_nominal)),
            kappa=float(kappa[j]), agc=bool(agc[j]),
        ))

    buses = []
    for i in range(n_buses):
        if i == 0:
            buses.append(Bus(1, 230.0, BusKind.SLACK, area_of(0), 1.02, 0.0))
        elif is_gen[i]:
            buses.append(Bus(i + 1, 230.0, BusKind.PV, area_of(i), rng.uniform(1.0, 1.04)))
        else:
            buses.append(Bus(i + 1, 230.0, BusKind.PQ, area_of(i)))

    areas = []
    for a in range(1, n_areas + 1):
        response = sum(g.droop_gain for g in gens if area_of(g.bus_id - 1) == a)
        response += sum(ld.k_pf * ld.p0 for ld in loads if area_of(ld.bus_id - 1) == a)
        areas.append(Area(a, beta=response / 10.0))

    case = NetworkCase(
        mva_base=mva_base, f_nominal=f_nominal, buses=buses, branches=branches,
        generators=gens, loads=loads, areas=areas, name=f"synthetic-{n_buses}-{seed}",
    )
    return to_per_unit(case)


def _renorm(fr):
    fr = np.asarray(fr, dtype=float)
    fr = fr / fr.sum()
    fr[2] = 1.0 - fr[0] - fr[1]
    return tuple(float(v) for v in fr)


def calibrate(case: NetworkCase, opts: SolverOptions | None = None) -> NetworkCase:
    """Set the slack dispatch and area schedules from a pinned-frequency solve.

    After calibration the case is in equilibrium at nominal frequency with
    zero ACE in every area.
    """
    case = to_per_unit(case)
    # let droop share the initial mismatch first, so the pinned solve does not
    # have to route the whole imbalance into the slack bus
    state, report = nr_solve(case, flat_start(case), {}, opts)
    if report.converged:
        smoothing = (opts or SolverOptions()).smoothing_hz
        dispatch = generator_dispatch(case, state, {}, smoothing)
        gens = tuple(
            replace(g, p_set=min(max(dispatch[g.id]["p_total"], g.p_min), g.p_max))
            if g.id in dispatch else g
            for g in case.generators
        )
        case = replace(case, generators=gens)
    else:
        state = flat_start(case)
    state, report = nr_solve(case, state, {}, opts, pin_df=True)
    if not report.converged:
        raise RuntimeError("calibration solve did not converge")
    slack = case.slack_bus.id
    v = state.voltages[state.index.slack]
    produced = (v * np.conj(state.slack_current)).real
    at_slack = [g for g in case.in_service_generators() if g.bus_id == slack]
    share = (produced - sum(g.p_set for g in at_slack)) / len(at_slack)
    gens = tuple(
        replace(g, p_set=g.p_set + share,
                p_max=max(g.p_max, g.p_set + share),
                p_min=min(g.p_min, g.p_set + share))
        if g in at_slack else g
        for g in case.generators
    )
    export = interchange(case, state.voltages)
    areas = tuple(replace(a, scheduled_interchange=export[a.id]) for a in case.areas)
    return replace(case, generators=gens, areas=areas)
