"""Newton-Raphson solver for the frequency-augmented current-injection system.

Unknowns, in vector order: ``v_r, v_i`` for every bus (bus order), one
reactive output per PV bus, the slack injection currents ``i_r, i_i`` and the
global frequency deviation ``df`` (Hz) last. Equations use the same slots:

* rows ``2k, 2k+1``: real/imaginary KCL at bus ``k``;
* PV slots: ``|V|^2 - v_set^2``;
* slack-current slots: slack voltage fixed at its setpoint;
* ``df`` slot: slack active power equals ``p_set + dP_primary(df) + dP_secondary``
  (or ``df = 0`` when frequency is pinned).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import maximum_bipartite_matching
from scipy.sparse.linalg import splu

from .control import (
    DEFAULT_SMOOTHING_HZ,
    build_droop_model,
    eval_primary,
    eval_primary_derivative,
)
from .network import BusKind, NetworkCase, admittance_matrix, branch_flows

__all__ = [
    "IndexMap",
    "NearSingularVoltageError",
    "SingularJacobianError",
    "SolveReport",
    "SolverOptions",
    "SolverState",
    "assemble_jacobian",
    "assemble_residuals",
    "flat_start",
    "generator_dispatch",
    "nr_solve",
    "power_balance_mismatch",
    "slack_power_mismatch",
]

logger = logging.getLogger(__name__)

V2_FLOOR = 1e-8


class NearSingularVoltageError(ArithmeticError):
    pass


class SingularJacobianError(ArithmeticError):
    def __init__(self, message, bus_id=None):
        super().__init__(message)
        self.bus_id = bus_id


@dataclass(frozen=True)
class SolverOptions:
    tol: float = 1e-8
    max_iter: int = 200
    step_cap: float = 0.1
    df_step_cap: float = 0.2
    smoothing_hz: float = DEFAULT_SMOOTHING_HZ

    def __post_init__(self):
        for name in ("tol", "max_iter", "step_cap", "df_step_cap", "smoothing_hz"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")


@dataclass
class SolveReport:
    converged: bool
    iterations: int
    final_residual_norm: float
    history: list[float] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)
    wall_time: float = 0.0


class IndexMap:
    """Positions of every unknown in the flat state vector."""

    def __init__(self, case: NetworkCase):
        self.bus_ids = [b.id for b in case.buses]
        self.n_bus = len(self.bus_ids)
        gen_buses = {g.bus_id for g in case.in_service_generators()}
        self.slack = case.bus_index[case.slack_bus.id]
        # PV buses without an in-service generator are treated as PQ
        self.pv = np.array(
            [
                i
                for i, b in enumerate(case.buses)
                if b.kind is BusKind.PV and b.id in gen_buses
            ],
            dtype=int,
        )
        self.n_pv = len(self.pv)
        self.q0 = 2 * self.n_bus
        self.i_r = self.q0 + self.n_pv
        self.i_i = self.i_r + 1
        self.df = self.i_i + 1
        self.size = self.df + 1

    def v_r(self, k):
        return 2 * k

    def v_i(self, k):
        return 2 * k + 1

    def describe(self, pos: int) -> tuple[str, int | None]:
        """Human-readable name of slot ``pos`` and the bus it belongs to."""
        if pos < self.q0:
            k = pos // 2
            return ("v_r" if pos % 2 == 0 else "v_i"), self.bus_ids[k]
        if pos < self.i_r:
            return "q_g", self.bus_ids[self.pv[pos - self.q0]]
        if pos in (self.i_r, self.i_i):
            return ("i_r_s" if pos == self.i_r else "i_i_s"), self.bus_ids[self.slack]
        return "df", None


@dataclass
class SolverState:
    x: np.ndarray
    index: IndexMap

    @property
    def voltages(self) -> np.ndarray:
        n = self.index.n_bus
        return self.x[0 : 2 * n : 2] + 1j * self.x[1 : 2 * n : 2]

    @property
    def q_pv(self) -> np.ndarray:
        return self.x[self.index.q0 : self.index.i_r]

    @property
    def slack_current(self) -> complex:
        return complex(self.x[self.index.i_r], self.x[self.index.i_i])

    @property
    def df(self) -> float:
        return float(self.x[self.index.df])

    def copy(self) -> SolverState:
        return SolverState(self.x.copy(), self.index)

    def transfer(self, case: NetworkCase) -> SolverState:
        """Carry this state onto ``case`` (possibly different PV set)."""
        new = IndexMap(case)
        old = self.index
        if new.bus_ids != old.bus_ids:
            raise ValueError("cannot transfer a state between different bus sets")
        x = np.zeros(new.size)
        n2 = 2 * new.n_bus
        x[:n2] = self.x[:n2]
        q_old = dict(zip(old.pv.tolist(), self.q_pv))
        for j, k in enumerate(new.pv.tolist()):
            x[new.q0 + j] = q_old.get(k, 0.0)
        x[new.i_r] = self.x[old.i_r]
        x[new.i_i] = self.x[old.i_i]
        x[new.df] = self.df
        s = case.slack_bus
        vs = s.v_set * complex(math.cos(s.angle_set), math.sin(s.angle_set))
        x[2 * new.slack], x[2 * new.slack + 1] = vs.real, vs.imag
        return SolverState(x, new)


def flat_start(case: NetworkCase) -> SolverState:
    """All non-slack voltages ``1+0j``; slack at its setpoint; everything else 0."""
    index = IndexMap(case)
    x = np.zeros(index.size)
    x[0 : 2 * index.n_bus : 2] = 1.0
    s = case.slack_bus
    x[2 * index.slack] = s.v_set * math.cos(s.angle_set)
    x[2 * index.slack + 1] = s.v_set * math.sin(s.angle_set)
    return SolverState(x, index)


class _System:
    """Case data laid out as arrays for residual/Jacobian evaluation."""

    def __init__(self, case, secondary=None, smoothing_hz=DEFAULT_SMOOTHING_HZ,
                 pin_df=False):
        if not case.per_unit:
            raise ValueError("solver expects a per-unit case")
        secondary = secondary or {}
        self.case = case
        self.index = IndexMap(case)
        self.pin_df = pin_df
        idx = case.bus_index
        n = self.index.n_bus
        s = self.index.slack

        gens = case.in_service_generators()
        self.gens = gens
        self.gen_bus = np.array([idx[g.bus_id] for g in gens], dtype=int)
        self.gen_p_set = np.array([g.p_set for g in gens], dtype=float)
        self.gen_secondary = np.array([secondary.get(g.id, 0.0) for g in gens], dtype=float)
        self.models = [build_droop_model(g, smoothing_hz) for g in gens]
        self.at_slack = self.gen_bus == s

        loads = case.in_service_loads()
        self.load_bus = np.array([idx[ld.bus_id] for ld in loads], dtype=int)
        self.p0 = np.array([ld.p0 for ld in loads], dtype=float)
        self.q0 = np.array([ld.q0 for ld in loads], dtype=float)
        self.zip_p = np.array([ld.zip_p for ld in loads], dtype=float).reshape(-1, 3)
        self.zip_q = np.array([ld.zip_q for ld in loads], dtype=float).reshape(-1, 3)
        self.k_pf = np.array([ld.k_pf for ld in loads], dtype=float)
        self.k_qf = np.array([ld.k_qf for ld in loads], dtype=float)

        self.has_injection = np.zeros(n, dtype=bool)
        self.has_injection[self.load_bus] = True
        self.has_injection[self.gen_bus[~self.at_slack]] = True
        self.has_injection[self.index.pv] = True

        sb = case.slack_bus
        self.v_slack = sb.v_set * complex(math.cos(sb.angle_set), math.sin(sb.angle_set))
        self.v_set_pv = np.array([case.buses[k].v_set for k in self.index.pv], dtype=float)

        ybus = admittance_matrix(case).tocoo()
        self.ybus = ybus.tocsr()
        r, c, y = ybus.row, ybus.col, ybus.data
        self._y_rows = np.concatenate([2 * r, 2 * r, 2 * r + 1, 2 * r + 1])
        self._y_cols = np.concatenate([2 * c, 2 * c + 1, 2 * c, 2 * c + 1])
        self._y_vals = np.concatenate([y.real, -y.imag, y.imag, y.real])

    # -- device models -------------------------------------------------
    def gen_power(self, df):
        dpp = np.array([eval_primary(m, df) for m in self.models], dtype=float)
        dpp_d = np.array([eval_primary_derivative(m, df) for m in self.models], dtype=float)
        return dpp, dpp_d

    def load_power(self, vm, df):
        """Per-load P, Q and their partials w.r.t. |V| and df."""
        v = vm[self.load_bus]
        zp, ip, pp = self.zip_p.T
        zq, iq, pq = self.zip_q.T
        fp = 1.0 + self.k_pf * df
        fq = 1.0 + self.k_qf * df
        kp = np.where(fp < 0.0, 0.0, self.k_pf)
        kq = np.where(fq < 0.0, 0.0, self.k_qf)
        fp = np.maximum(fp, 0.0)
        fq = np.maximum(fq, 0.0)
        poly_p = self.p0 * (zp * v * v + ip * v + pp)
        poly_q = self.q0 * (zq * v * v + iq * v + pq)
        p = poly_p * fp
        q = poly_q * fq
        dp_dv = self.p0 * (2.0 * zp * v + ip) * fp
        dq_dv = self.q0 * (2.0 * zq * v + iq) * fq
        return p, q, dp_dv, dq_dv, poly_p * kp, poly_q * kq

    def slack_target(self, df, dpp=None):
        if dpp is None:
            dpp, _ = self.gen_power(df)
        sel = self.at_slack
        return float(np.sum(self.gen_p_set[sel] + dpp[sel] + self.gen_secondary[sel]))

    # -- bus quantities ------------------------------------------------
    def _injections(self, x):
        ix = self.index
        n = ix.n_bus
        vr = x[0 : 2 * n : 2]
        vi = x[1 : 2 * n : 2]
        m = vr * vr + vi * vi
        bad = self.has_injection & (m < V2_FLOOR)
        if np.any(bad):
            ids = [ix.bus_ids[k] for k in np.flatnonzero(bad)]
            raise NearSingularVoltageError(f"near-zero voltage at bus(es) {ids}")
        vm = np.sqrt(m)
        df = x[ix.df]

        dpp, dpp_d = self.gen_power(df)
        other = ~self.at_slack
        P = np.zeros(n)
        Q = np.zeros(n)
        Pv = np.zeros(n)
        Qv = np.zeros(n)
        Pf = np.zeros(n)
        Qf = np.zeros(n)
        np.add.at(P, self.gen_bus[other],
                  self.gen_p_set[other] + dpp[other] + self.gen_secondary[other])
        np.add.at(Pf, self.gen_bus[other], dpp_d[other])
        Q[ix.pv] += x[ix.q0 : ix.i_r]
        if len(self.load_bus):
            pl, ql, pl_v, ql_v, pl_f, ql_f = self.load_power(vm, df)
            np.subtract.at(P, self.load_bus, pl)
            np.subtract.at(Q, self.load_bus, ql)
            np.subtract.at(Pv, self.load_bus, pl_v)
            np.subtract.at(Qv, self.load_bus, ql_v)
            np.subtract.at(Pf, self.load_bus, pl_f)
            np.subtract.at(Qf, self.load_bus, ql_f)
        return vr, vi, m, vm, P, Q, Pv, Qv, Pf, Qf, dpp, dpp_d

    def residuals(self, x):
        ix = self.index
        n = ix.n_bus
        s = ix.slack
        vr, vi, m, vm, P, Q, *_rest, dpp, _ = self._injections(x)
        safe = np.where(m < V2_FLOOR, 1.0, m)
        i_inj_r = (P * vr + Q * vi) / safe
        i_inj_i = (P * vi - Q * vr) / safe
        v = vr + 1j * vi
        i_net = self.ybus @ v
        f = np.empty(ix.size)
        f[0 : 2 * n : 2] = i_net.real - i_inj_r
        f[1 : 2 * n : 2] = i_net.imag - i_inj_i
        i_r, i_i = x[ix.i_r], x[ix.i_i]
        f[2 * s] -= i_r
        f[2 * s + 1] -= i_i
        pv = ix.pv
        f[ix.q0 : ix.i_r] = m[pv] - self.v_set_pv**2
        f[ix.i_r] = vr[s] - self.v_slack.real
        f[ix.i_i] = vi[s] - self.v_slack.imag
        if self.pin_df:
            f[ix.df] = x[ix.df]
        else:
            f[ix.df] = self.slack_target(x[ix.df], dpp) - (vr[s] * i_r + vi[s] * i_i)
        return f

    def jacobian(self, x):
        ix = self.index
        n = ix.n_bus
        s = ix.slack
        vr, vi, m, vm, P, Q, Pv, Qv, Pf, Qf, dpp, dpp_d = self._injections(x)
        safe_m = np.where(m < V2_FLOOR, 1.0, m)
        safe_vm = np.sqrt(safe_m)
        m2 = safe_m * safe_m
        ar = P * vr + Q * vi
        ai = P * vi - Q * vr
        dpr = Pv * vr / safe_vm  # dP/dvr
        dpi = Pv * vi / safe_vm
        dqr = Qv * vr / safe_vm
        dqi = Qv * vi / safe_vm
        d_rr = (P + vr * dpr + vi * dqr) / safe_m - 2.0 * vr * ar / m2
        d_ri = (Q + vr * dpi + vi * dqi) / safe_m - 2.0 * vi * ar / m2
        d_ir = (-Q + vi * dpr - vr * dqr) / safe_m - 2.0 * vr * ai / m2
        d_ii = (P + vi * dpi - vr * dqi) / safe_m - 2.0 * vi * ai / m2
        act = np.flatnonzero(self.has_injection)
        rows = [self._y_rows,
                2 * act, 2 * act, 2 * act + 1, 2 * act + 1]
        cols = [self._y_cols,
                2 * act, 2 * act + 1, 2 * act, 2 * act + 1]
        vals = [self._y_vals,
                -d_rr[act], -d_ri[act], -d_ir[act], -d_ii[act]]

        pv = ix.pv
        qcols = ix.q0 + np.arange(ix.n_pv)
        rows += [2 * pv, 2 * pv + 1]
        cols += [qcols, qcols]
        vals += [-vi[pv] / safe_m[pv], vr[pv] / safe_m[pv]]

        dfc = np.full(n, ix.df)
        rows += [np.arange(0, 2 * n, 2), np.arange(1, 2 * n, 2)]
        cols += [dfc, dfc]
        vals += [-(vr * Pf + vi * Qf) / safe_m, -(vi * Pf - vr * Qf) / safe_m]

        i_r, i_i = x[ix.i_r], x[ix.i_i]
        extra_r = [2 * s, 2 * s + 1, ix.i_r, ix.i_i]
        extra_c = [ix.i_r, ix.i_i, 2 * s, 2 * s + 1]
        extra_v = [-1.0, -1.0, 1.0, 1.0]
        rows += [qcols, qcols]
        cols += [2 * pv, 2 * pv + 1]
        vals += [2.0 * vr[pv], 2.0 * vi[pv]]
        if self.pin_df:
            extra_r += [ix.df]
            extra_c += [ix.df]
            extra_v += [1.0]
        else:
            extra_r += [ix.df] * 5
            extra_c += [ix.df, 2 * s, 2 * s + 1, ix.i_r, ix.i_i]
            extra_v += [float(np.sum(dpp_d[self.at_slack])), -i_r, -i_i, -vr[s], -vi[s]]
        rows.append(np.array(extra_r, dtype=int))
        cols.append(np.array(extra_c, dtype=int))
        vals.append(np.array(extra_v, dtype=float))
        return sp.coo_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
            shape=(ix.size, ix.size),
        )


def _system(case, secondary, smoothing_hz, pin_df):
    return _System(case, secondary, smoothing_hz, pin_df)


def assemble_residuals(case, state, secondary=None, *, smoothing_hz=DEFAULT_SMOOTHING_HZ,
                       pin_df=False) -> np.ndarray:
    """Residual vector of the augmented system at ``state``."""
    system = _system(case, secondary, smoothing_hz, pin_df)
    _check_state(system, state)
    return system.residuals(state.x)


def assemble_jacobian(case, state, secondary=None, *, smoothing_hz=DEFAULT_SMOOTHING_HZ,
                      pin_df=False) -> sp.coo_matrix:
    """Analytic Jacobian in triplet form (duplicates are summed on conversion)."""
    system = _system(case, secondary, smoothing_hz, pin_df)
    _check_state(system, state)
    return system.jacobian(state.x)


def _check_state(system, state):
    if state.x.shape != (system.index.size,):
        raise ValueError(
            f"state has {state.x.shape[0]} entries, case needs {system.index.size}"
        )


def _diagnose_singular(jac: sp.csc_matrix, index: IndexMap) -> SingularJacobianError:
    csr = jac.tocsr()
    csr.eliminate_zeros()
    empty_cols = np.flatnonzero(np.diff(csr.tocsc().indptr) == 0)
    if len(empty_cols):
        name, bus = index.describe(int(empty_cols[0]))
        where = f" at bus {bus}" if bus is not None else ""
        return SingularJacobianError(
            f"singular Jacobian: unknown {name}{where} does not enter any equation",
            bus_id=bus,
        )
    empty = np.flatnonzero(np.diff(csr.indptr) == 0)
    if len(empty):
        row = int(empty[0])
    else:
        match = maximum_bipartite_matching(csr, perm_type="column")
        unmatched = np.flatnonzero(match < 0)
        row = int(unmatched[0]) if len(unmatched) else None
    if row is None:
        return SingularJacobianError("Jacobian is numerically singular")
    name, bus = index.describe(row)
    where = f"bus {bus}" if bus is not None else "the frequency equation"
    return SingularJacobianError(
        f"singular Jacobian: equation {row} ({name}) at {where}", bus_id=bus
    )


class _Factorizer:
    """Sparse LU that reuses one fill-reducing column order per topology."""

    def __init__(self, index: IndexMap):
        self.index = index
        self.order = None

    def solve(self, jac: sp.coo_matrix, rhs: np.ndarray) -> np.ndarray:
        csc = jac.tocsc()
        try:
            if self.order is None:
                lu = splu(csc, permc_spec="COLAMD")
                self.order = np.argsort(lu.perm_c)
                return lu.solve(rhs)
            lu = splu(csc[:, self.order], permc_spec="NATURAL")
        except RuntimeError:
            raise _diagnose_singular(csc, self.index) from None
        y = lu.solve(rhs)
        out = np.empty_like(y)
        out[self.order] = y
        return out


def nr_solve(case, initial: SolverState, secondary=None, opts: SolverOptions | None = None,
             *, pin_df: bool = False) -> tuple[SolverState, SolveReport]:
    """Damped Newton-Raphson with per-variable step caps.

    Frequency is pinned to zero automatically when the case has no
    frequency coupling at all (no droop, no frequency-sensitive load), in
    which case the slack absorbs the imbalance as in a classic power flow.
    """
    import time

    opts = opts or SolverOptions()
    system = _System(case, secondary, opts.smoothing_hz, pin_df or not has_frequency_coupling(case))
    ix = system.index
    if initial.index.size != ix.size or initial.index.bus_ids != ix.bus_ids:
        initial = initial.transfer(case)
    x = initial.x.astype(float, copy=True)
    if system.pin_df:
        x[ix.df] = 0.0
    n2 = 2 * ix.n_bus
    fact = _Factorizer(ix)
    history: list[float] = []
    converged = False
    it = 0
    t0 = time.perf_counter()
    while True:
        r = system.residuals(x)
        norm = float(np.max(np.abs(r))) if r.size else 0.0
        history.append(norm)
        if not np.isfinite(norm):
            break
        if norm <= opts.tol:
            converged = True
            break
        if it >= opts.max_iter:
            break
        dx = fact.solve(system.jacobian(x), r)
        np.clip(dx[:n2], -opts.step_cap, opts.step_cap, out=dx[:n2])
        dx[ix.df] = min(max(dx[ix.df], -opts.df_step_cap), opts.df_step_cap)
        x -= dx
        it += 1
    state = SolverState(x, ix)
    report = SolveReport(
        converged=converged,
        iterations=it,
        final_residual_norm=history[-1],
        history=history,
        wall_time=time.perf_counter() - t0,
    )
    if converged:
        report.warnings.extend(_operating_warnings(system, state))
    else:
        logger.warning("NR did not converge after %d iterations (residual %.3e)",
                       it, history[-1])
    return state, report


def has_frequency_coupling(case) -> bool:
    gens = case.in_service_generators()
    loads = case.in_service_loads()
    return any(g.droop_gain > 0 for g in gens) or any(
        ld.k_pf != 0 or ld.k_qf != 0 for ld in loads
    )


def generator_dispatch(case, state, secondary=None, smoothing_hz=DEFAULT_SMOOTHING_HZ):
    """Per in-service generator ``(p_set, dp_primary, dp_secondary, total, q)``.

    Reactive output on a bus is split equally among its generators; at the
    slack bus it comes from the slack injection current.
    """
    system = _System(case, secondary, smoothing_hz)
    return _dispatch(system, state)


def _dispatch(system, state):
    ix = system.index
    df = state.df
    dpp, _ = system.gen_power(df)
    v = state.voltages
    q_bus = np.zeros(ix.n_bus)
    q_bus[ix.pv] = state.q_pv
    s_slack = v[ix.slack] * np.conj(state.slack_current)
    # slack-bus reactive is the generator's, loads there are separate
    q_bus[ix.slack] = s_slack.imag
    count = np.bincount(system.gen_bus, minlength=ix.n_bus)
    out = {}
    for j, g in enumerate(system.gens):
        k = system.gen_bus[j]
        total = system.gen_p_set[j] + dpp[j] + system.gen_secondary[j]
        out[g.id] = {
            "p_set": float(system.gen_p_set[j]),
            "dp_primary": float(dpp[j]),
            "dp_secondary": float(system.gen_secondary[j]),
            "p_total": float(total),
            "q": float(q_bus[k] / count[k]),
        }
    return out


def _operating_warnings(system, state):
    df = state.df
    warnings = []
    for g, model in zip(system.gens, system.models):
        region = model.region(df)
        if region != 3:
            warnings.append(f"generator {g.id} in saturated droop region {region}")
    for gid, d in _dispatch(system, state).items():
        g = next(gg for gg in system.gens if gg.id == gid)
        if d["p_total"] > g.p_max + 1e-9 or d["p_total"] < g.p_min - 1e-9:
            warnings.append(
                f"generator {gid} total output {d['p_total']:.6g} pu outside "
                f"[{g.p_min:.6g}, {g.p_max:.6g}]"
            )
    return warnings


def losses(case, state) -> float:
    _, s_f, s_t = branch_flows(case, state.voltages)
    return float(np.sum(s_f.real) + np.sum(s_t.real))


def power_balance_mismatch(case, state, secondary=None, smoothing_hz=DEFAULT_SMOOTHING_HZ):
    """Total generation minus scaled load minus branch losses (pu).

    Slack generation is measured from its voltage and current.
    """
    system = _System(case, secondary, smoothing_hz)
    v = state.voltages
    vm = np.abs(v)
    df = state.df
    dpp, _ = system.gen_power(df)
    other = ~system.at_slack
    p_gen = float(np.sum(system.gen_p_set[other] + dpp[other] + system.gen_secondary[other]))
    p_gen += float((v[system.index.slack] * np.conj(state.slack_current)).real)
    p_load = 0.0
    if len(system.load_bus):
        p_load = float(np.sum(system.load_power(vm, df)[0]))
    return p_gen - p_load - losses(case, state)


def slack_power_mismatch(case, state, secondary=None, smoothing_hz=DEFAULT_SMOOTHING_HZ):
    """Slack target ``p_set + dP_p + dP_s`` minus the power drawn from ``V * conj(I)``."""
    system = _System(case, secondary, smoothing_hz)
    v = state.voltages[system.index.slack]
    return system.slack_target(state.df) - float((v * np.conj(state.slack_current)).real)
