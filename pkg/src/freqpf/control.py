"""Frequency-coupled device models.

Primary response uses a five-region, continuously differentiable droop curve:
flat at the upper bound for large under-frequency, a quadratic patch, the
linear droop line through the origin, a second patch, and flat at the lower
bound for large over-frequency. Secondary (AGC) response is a fixed
injection ``kappa * ACE`` computed from the post-primary state.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .network import Area, Generator, Load, NetworkCase, Status, branch_flows

__all__ = [
    "AceMeasurement",
    "OverlappingPatchError",
    "SmoothDroopModel",
    "build_droop_model",
    "compute_ace",
    "eval_primary",
    "eval_primary_derivative",
    "interchange",
    "scaled_load",
    "secondary_setpoints",
]

DEFAULT_SMOOTHING_HZ = 0.02


class OverlappingPatchError(ValueError):
    pass


@dataclass(frozen=True)
class SmoothDroopModel:
    """C1 saturating droop curve.

    ``breakpoints`` are ascending region boundaries ``(f1, f2, f3, f4)`` in Hz.
    Below ``f1`` the output is ``dp_max``; ``[f1, f2]`` is the ``quad_max``
    patch; ``[f2, f3]`` is linear with ``slope``; ``[f3, f4]`` is ``quad_min``;
    above ``f4`` the output is ``dp_min``. Quadratics are ``(a, b, c)`` for
    ``a*df**2 + b*df + c``; evaluation uses the equivalent vertex form about
    the flat endpoint, which avoids cancellation when the kink is far from 0.
    """

    dp_min: float
    dp_max: float
    slope: float
    width: float
    breakpoints: tuple[float, float, float, float]
    quad_max: tuple[float, float, float]
    quad_min: tuple[float, float, float]

    @property
    def is_zero(self) -> bool:
        return self.slope == 0.0

    def region(self, df: float) -> int:
        """Region number 1..5 in order of increasing frequency deviation."""
        if self.is_zero:
            return 3
        f1, f2, f3, f4 = self.breakpoints
        if df < f1:
            return 1
        if df < f2:
            return 2
        if df <= f3:
            return 3
        if df <= f4:
            return 4
        return 5

    def __call__(self, df: float) -> float:
        return eval_primary(self, df)


ZERO_MODEL = SmoothDroopModel(
    dp_min=0.0,
    dp_max=0.0,
    slope=0.0,
    width=DEFAULT_SMOOTHING_HZ,
    breakpoints=(0.0, 0.0, 0.0, 0.0),
    quad_max=(0.0, 0.0, 0.0),
    quad_min=(0.0, 0.0, 0.0),
)


def _patch(m: float, f_lin: float, f_flat: float, bound: float):
    # zero slope and value `bound` at f_flat; slope m at f_lin
    a = m / (2.0 * (f_lin - f_flat))
    b = -2.0 * a * f_flat
    c = bound + a * f_flat * f_flat
    return a, b, c


def build_droop_model(gen: Generator, width: float = DEFAULT_SMOOTHING_HZ) -> SmoothDroopModel:
    """Build the smooth droop curve for ``gen`` with patches of ``width`` Hz.

    Each patch is centred on the kink where the linear droop line meets a
    power limit. Raises :class:`OverlappingPatchError` when the linear region
    is not wider than ``width``.
    """
    if not width > 0:
        raise ValueError(f"patch width must be positive, got {width}")
    if gen.droop_gain == 0:
        return ZERO_MODEL
    gain = gen.droop_gain
    m = -gain
    dp_min = gen.p_min - gen.p_set
    dp_max = gen.p_max - gen.p_set
    k_max = -dp_max / gain  # under-frequency kink
    k_min = -dp_min / gain  # over-frequency kink
    if not k_min - k_max > width:
        raise OverlappingPatchError(
            f"generator {gen.id}: linear droop region ({k_min - k_max:.6g} Hz) "
            f"is not wider than the patch width {width} Hz"
        )
    half = 0.5 * width
    f1, f2, f3, f4 = k_max - half, k_max + half, k_min - half, k_min + half
    return SmoothDroopModel(
        dp_min=dp_min,
        dp_max=dp_max,
        slope=m,
        width=width,
        breakpoints=(f1, f2, f3, f4),
        quad_max=_patch(m, f2, f1, dp_max),
        quad_min=_patch(m, f3, f4, dp_min),
    )


def _patch_terms(model: SmoothDroopModel, region: int):
    """Curvature, flat endpoint and bound of the patch in ``region`` (2 or 4)."""
    f1, _, _, f4 = model.breakpoints
    if region == 2:
        return model.quad_max[0], f1, model.dp_max
    return model.quad_min[0], f4, model.dp_min


def eval_primary(model: SmoothDroopModel, df: float) -> float:
    """Primary power deviation at frequency deviation ``df``."""
    region = model.region(df)
    if region == 1:
        return model.dp_max
    if region == 5:
        return model.dp_min
    if region == 3:
        return model.slope * df
    # same polynomial as a*df**2 + b*df + c, written about its vertex: every
    # step is monotone under rounding, so the result never leaves the bounds
    a, f_flat, bound = _patch_terms(model, region)
    u = df - f_flat
    return bound + a * (u * u)


def eval_primary_derivative(model: SmoothDroopModel, df: float) -> float:
    region = model.region(df)
    if region in (1, 5):
        return 0.0
    if region == 3:
        return model.slope
    a, f_flat, _ = _patch_terms(model, region)
    return 2.0 * a * (df - f_flat)


@dataclass(frozen=True)
class AceMeasurement:
    """Area control error frozen at the post-primary solution (per-unit).

    Positive ``ace`` asks the area for more generation.
    """

    area_id: int
    interchange_deviation: float
    delta_f1: float
    ace: float
    beta: float = 0.0

    def recompute(self) -> float:
        return ace_value(self.interchange_deviation, self.beta, self.delta_f1)


def ace_value(interchange_deviation: float, beta: float, df: float) -> float:
    # bias is stored as a positive magnitude and enters with a negative sign
    return interchange_deviation - 10.0 * beta * df


def interchange(case: NetworkCase, voltages: np.ndarray) -> dict[int, float]:
    """Actual net real-power export of every area over its tie lines."""
    area_of = {b.id: b.area_id for b in case.buses}
    export = {a.id: 0.0 for a in case.areas}
    brs, s_f, s_t = branch_flows(case, voltages)
    for br, sf, st in zip(brs, s_f, s_t):
        af, at = area_of[br.from_bus], area_of[br.to_bus]
        if af != at:
            export[af] = export.get(af, 0.0) + sf.real
            export[at] = export.get(at, 0.0) + st.real
    return export


def compute_ace(area: Area, stage1) -> AceMeasurement:
    """ACE of ``area`` at a converged post-primary ``stage1`` result.

    ``stage1`` must expose ``case`` (per-unit), ``state.voltages`` and ``df``.
    """
    case = stage1.case
    known = {a.id for a in case.areas}
    if area.id not in known:
        raise KeyError(f"unknown area id {area.id}")
    actual = interchange(case, stage1.state.voltages)[area.id]
    deviation = area.scheduled_interchange - actual
    df1 = float(stage1.df)
    return AceMeasurement(
        area_id=area.id,
        interchange_deviation=deviation,
        delta_f1=df1,
        ace=ace_value(deviation, area.beta, df1),
        beta=area.beta,
    )


def secondary_setpoints(case: NetworkCase, measurements) -> dict[int, float]:
    """Map generator id to its fixed AGC injection ``kappa * ACE``.

    ``measurements`` maps area id to :class:`AceMeasurement`. Generators that
    are out of service, not on AGC, or in an unmeasured area get zero.
    """
    area_of = {b.id: b.area_id for b in case.buses}
    out: dict[int, float] = {}
    for gen in case.generators:
        meas = measurements.get(area_of.get(gen.bus_id))
        if gen.status is Status.IN_SERVICE and gen.agc and meas is not None:
            out[gen.id] = gen.kappa * meas.ace
        else:
            out[gen.id] = 0.0
    return out


def _freq_factor(k: float, df: float) -> tuple[float, float]:
    fac = 1.0 + k * df
    if fac < 0.0:
        return 0.0, 0.0
    return fac, k


def scaled_load(load: Load, v_mag: float, df: float) -> tuple[float, float]:
    """ZIP load at voltage ``v_mag`` (pu) scaled by the frequency factors."""
    zp, ip, pp = load.zip_p
    zq, iq, pq = load.zip_q
    fp, _ = _freq_factor(load.k_pf, df)
    fq, _ = _freq_factor(load.k_qf, df)
    p = load.p0 * (zp * v_mag * v_mag + ip * v_mag + pp) * fp
    q = load.q0 * (zq * v_mag * v_mag + iq * v_mag + pq) * fq
    return p, q
