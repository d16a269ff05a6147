"""Per-unit network description: buses, branches, generators, loads, areas.

All containers are frozen dataclasses. A :class:`NetworkCase` carries a
``per_unit`` flag so that :func:`to_per_unit` is idempotent.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace
from functools import cached_property

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components

__all__ = [
    "Area",
    "Branch",
    "Bus",
    "BusKind",
    "Generator",
    "Load",
    "NetworkCase",
    "Status",
    "ValidationError",
    "admittance_matrix",
    "branch_flows",
    "to_per_unit",
    "to_physical",
    "validate",
]

ZIP_TOL = 1e-9


class BusKind(str, enum.Enum):
    SLACK = "Slack"
    PV = "PV"
    PQ = "PQ"


class Status(str, enum.Enum):
    IN_SERVICE = "InService"
    OUT = "Out"


class ValidationError(ValueError):
    """Raised when a case fails validation; ``problems`` holds the report."""

    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("invalid case:\n  " + "\n  ".join(self.problems))


@dataclass(frozen=True)
class Bus:
    id: int
    base_kv: float
    kind: BusKind = BusKind.PQ
    area_id: int = 1
    v_set: float | None = None
    angle_set: float = 0.0  # radians, slack only


@dataclass(frozen=True)
class Branch:
    id: int
    from_bus: int
    to_bus: int
    r: float
    x: float
    b_sh: float = 0.0
    tap: float = 1.0
    status: Status = Status.IN_SERVICE


@dataclass(frozen=True)
class Generator:
    """Synchronous unit; MW fields are in pu once the case is per-unit.

    ``droop_gain`` is the steady-state governor gain (MW/Hz, or pu/Hz).
    """

    id: int
    bus_id: int
    p_set: float
    p_min: float
    p_max: float
    droop_gain: float = 0.0
    kappa: float = 0.0
    agc: bool = False
    status: Status = Status.IN_SERVICE


@dataclass(frozen=True)
class Load:
    id: int
    bus_id: int
    p0: float
    q0: float = 0.0
    zip_p: tuple[float, float, float] = (0.0, 0.0, 1.0)
    zip_q: tuple[float, float, float] = (0.0, 0.0, 1.0)
    k_pf: float = 0.0  # 1/Hz
    k_qf: float = 0.0  # 1/Hz
    status: Status = Status.IN_SERVICE


@dataclass(frozen=True)
class Area:
    id: int
    beta: float = 0.0  # MW per 0.1 Hz (pu per 0.1 Hz once per-unit)
    scheduled_interchange: float = 0.0  # net export


@dataclass(frozen=True)
class NetworkCase:
    mva_base: float = 100.0
    f_nominal: float = 60.0
    buses: tuple[Bus, ...] = ()
    branches: tuple[Branch, ...] = ()
    generators: tuple[Generator, ...] = ()
    loads: tuple[Load, ...] = ()
    areas: tuple[Area, ...] = ()
    per_unit: bool = False
    name: str = field(default="", compare=False)

    def __post_init__(self):
        # accept any iterable for the collections
        for name in ("buses", "branches", "generators", "loads", "areas"):
            value = getattr(self, name)
            if not isinstance(value, tuple):
                object.__setattr__(self, name, tuple(value))

    @cached_property
    def bus_index(self) -> dict[int, int]:
        return {b.id: i for i, b in enumerate(self.buses)}

    def bus(self, bus_id: int) -> Bus:
        return self.buses[self.bus_index[bus_id]]

    def generator(self, gen_id: int) -> Generator:
        for g in self.generators:
            if g.id == gen_id:
                return g
        raise KeyError(f"no generator with id {gen_id}")

    def area(self, area_id: int) -> Area:
        for a in self.areas:
            if a.id == area_id:
                return a
        raise KeyError(f"no area with id {area_id}")

    @property
    def slack_bus(self) -> Bus:
        slacks = [b for b in self.buses if b.kind is BusKind.SLACK]
        if len(slacks) != 1:
            raise ValidationError([f"expected exactly one slack bus, found {len(slacks)}"])
        return slacks[0]

    def in_service_generators(self):
        return [g for g in self.generators if g.status is Status.IN_SERVICE]

    def in_service_loads(self):
        return [ld for ld in self.loads if ld.status is Status.IN_SERVICE]

    def in_service_branches(self):
        return [br for br in self.branches if br.status is Status.IN_SERVICE]


def _duplicates(ids):
    seen, dup = set(), []
    for i in ids:
        if i in seen and i not in dup:
            dup.append(i)
        seen.add(i)
    return dup


def _islands(case: NetworkCase) -> list[list[int]]:
    n = len(case.buses)
    idx = case.bus_index
    rows, cols = [], []
    for br in case.in_service_branches():
        if br.from_bus in idx and br.to_bus in idx:
            rows.append(idx[br.from_bus])
            cols.append(idx[br.to_bus])
    adj = sp.coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))
    ncomp, labels = connected_components(adj, directed=False)
    groups = [[] for _ in range(ncomp)]
    for i, lab in enumerate(labels):
        groups[lab].append(case.buses[i].id)
    return groups


def validate(case: NetworkCase) -> list[str]:
    """Return a list of human-readable invariant violations (empty if valid).

    Never raises for structurally well-formed input; every problem found is
    reported rather than stopping at the first.
    """
    problems: list[str] = []
    if not case.mva_base > 0:
        problems.append(f"mva_base must be positive, got {case.mva_base}")
    if not case.f_nominal > 0:
        problems.append(f"f_nominal must be positive, got {case.f_nominal}")

    for kind, items in (
        ("bus", case.buses),
        ("branch", case.branches),
        ("generator", case.generators),
        ("load", case.loads),
        ("area", case.areas),
    ):
        for d in _duplicates([it.id for it in items]):
            problems.append(f"duplicate {kind} id {d}")

    bus_ids = {b.id for b in case.buses}
    area_ids = {a.id for a in case.areas}

    slacks = [b for b in case.buses if b.kind is BusKind.SLACK]
    if not slacks:
        problems.append("no slack bus")
    elif len(slacks) > 1:
        problems.append(
            "more than one slack bus: " + ", ".join(str(b.id) for b in slacks)
        )

    for b in case.buses:
        if not b.base_kv > 0:
            problems.append(f"bus {b.id}: base_kv must be positive")
        if b.kind in (BusKind.SLACK, BusKind.PV):
            if b.v_set is None or not b.v_set > 0:
                problems.append(f"bus {b.id}: {b.kind.value} bus needs a positive v_set")
        elif b.v_set is not None and not b.v_set > 0:
            problems.append(f"bus {b.id}: v_set must be positive")
        if b.area_id not in area_ids:
            problems.append(f"bus {b.id}: dangling reference to area {b.area_id}")

    for br in case.branches:
        for end in (br.from_bus, br.to_bus):
            if end not in bus_ids:
                problems.append(f"branch {br.id}: dangling reference to bus {end}")
        if br.from_bus == br.to_bus:
            problems.append(f"branch {br.id}: from_bus equals to_bus")
        if br.r == 0 and br.x == 0:
            problems.append(f"branch {br.id}: zero series impedance")
        if not br.tap > 0:
            problems.append(f"branch {br.id}: tap must be positive")

    for g in case.generators:
        if g.bus_id not in bus_ids:
            problems.append(f"generator {g.id}: dangling reference to bus {g.bus_id}")
        if not g.p_min <= g.p_set <= g.p_max:
            problems.append(f"generator {g.id}: requires p_min <= p_set <= p_max")
        if g.droop_gain < 0:
            problems.append(f"generator {g.id}: droop_gain must be nonnegative")
        if not 0 <= g.kappa <= 1:
            problems.append(f"generator {g.id}: kappa must lie in [0, 1]")
        if g.agc and not g.kappa > 0:
            problems.append(f"generator {g.id}: agc generator needs kappa > 0")

    for ld in case.loads:
        if ld.bus_id not in bus_ids:
            problems.append(f"load {ld.id}: dangling reference to bus {ld.bus_id}")
        for label, fr in (("zip_p", ld.zip_p), ("zip_q", ld.zip_q)):
            if len(fr) != 3 or min(fr) < 0 or abs(sum(fr) - 1.0) > ZIP_TOL:
                problems.append(
                    f"load {ld.id}: {label} fractions must be nonnegative and sum to 1"
                )

    for a in case.areas:
        if a.beta < 0:
            problems.append(f"area {a.id}: beta must be nonnegative")

    if len(slacks) == 1 and slacks[0].id in bus_ids:
        s = slacks[0].id
        if not any(g.bus_id == s for g in case.in_service_generators()):
            problems.append(
                f"slack bus {s} has no in-service generator (no frequency-coupled closure)"
            )

    if case.buses and not any(p.startswith("duplicate bus") for p in problems):
        islands = _islands(case)
        if len(islands) > 1:
            islands.sort(key=len, reverse=True)
            for isl in islands[1:]:
                problems.append(
                    "network is not connected; island: "
                    + ", ".join(str(i) for i in sorted(isl))
                )
    return problems


_GEN_POWER = ("p_set", "p_min", "p_max", "droop_gain")
_LOAD_POWER = ("p0", "q0")
_AREA_POWER = ("beta", "scheduled_interchange")


def _rescale(case: NetworkCase, factor: float) -> NetworkCase:
    gens = [
        replace(g, **{k: getattr(g, k) * factor for k in _GEN_POWER})
        for g in case.generators
    ]
    loads = [
        replace(ld, **{k: getattr(ld, k) * factor for k in _LOAD_POWER})
        for ld in case.loads
    ]
    areas = [
        replace(a, **{k: getattr(a, k) * factor for k in _AREA_POWER})
        for a in case.areas
    ]
    return replace(case, generators=tuple(gens), loads=tuple(loads), areas=tuple(areas))


def to_per_unit(case: NetworkCase) -> NetworkCase:
    """Divide every MW/MVAr quantity by ``mva_base``. No-op on per-unit input."""
    if case.per_unit:
        return case
    if not case.mva_base > 0:
        raise ValueError(f"mva_base must be positive, got {case.mva_base}")
    return replace(_rescale(case, 1.0 / case.mva_base), per_unit=True)


def to_physical(case: NetworkCase) -> NetworkCase:
    """Inverse of :func:`to_per_unit`."""
    if not case.per_unit:
        return case
    return replace(_rescale(case, case.mva_base), per_unit=False)


def admittance_matrix(case: NetworkCase) -> sp.csr_matrix:
    """Bus admittance matrix from in-service pi-model branches.

    The off-nominal tap sits on the from side.
    """
    n = len(case.buses)
    idx = case.bus_index
    brs = case.in_service_branches()
    if not brs:
        return sp.csr_matrix((n, n), dtype=complex)
    f = np.array([idx[b.from_bus] for b in brs])
    t = np.array([idx[b.to_bus] for b in brs])
    yff, yft, ytf, ytt = _branch_admittances(brs)
    rows = np.concatenate([f, f, t, t])
    cols = np.concatenate([f, t, f, t])
    vals = np.concatenate([yff, yft, ytf, ytt])
    return sp.coo_matrix((vals, (rows, cols)), shape=(n, n)).tocsr()


def _branch_admittances(brs):
    r = np.array([b.r for b in brs], dtype=float)
    x = np.array([b.x for b in brs], dtype=float)
    bsh = np.array([b.b_sh for b in brs], dtype=float)
    tap = np.array([b.tap for b in brs], dtype=float)
    ys = 1.0 / (r + 1j * x)
    ytt = ys + 0.5j * bsh
    yff = ytt / tap**2
    yft = -ys / tap
    return yff, yft, yft.copy(), ytt


def branch_flows(case: NetworkCase, v: np.ndarray):
    """Complex power entering each in-service branch at both ends.

    Returns ``(branches, s_from, s_to)`` in per-unit.
    """
    idx = case.bus_index
    brs = case.in_service_branches()
    if not brs:
        empty = np.zeros(0, dtype=complex)
        return brs, empty, empty
    f = np.array([idx[b.from_bus] for b in brs])
    t = np.array([idx[b.to_bus] for b in brs])
    yff, yft, ytf, ytt = _branch_admittances(brs)
    i_f = yff * v[f] + yft * v[t]
    i_t = ytf * v[f] + ytt * v[t]
    return brs, v[f] * np.conj(i_f), v[t] * np.conj(i_t)
