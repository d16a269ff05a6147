"""Estimator-style front end so solves compose with sklearn tooling.

>>> pf = FrequencyPowerFlow(smoothing_hz=0.02).fit("twobus.json")  # doctest: +SKIP
>>> pf.df_                                                         # doctest: +SKIP
array([-0.5,  0. ])
"""

from __future__ import annotations

from collections.abc import Mapping
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .network import NetworkCase, ValidationError, to_per_unit, validate
from .solver import SolverOptions, flat_start
from .staged import run_base, run_stage1, run_stage2, run_timeline

__all__ = ["FrequencyPowerFlow", "check_case"]

STAGES = ("base", "primary", "both")


def check_case(X) -> NetworkCase:
    """Coerce ``X`` (case, JSON path, or case dict) to a validated per-unit case."""
    from .caseio import case_from_dict, parse_case

    if isinstance(X, NetworkCase):
        case = to_per_unit(X)
    elif isinstance(X, (str, Path)):
        case = parse_case(X)
    elif isinstance(X, Mapping):
        case = to_per_unit(case_from_dict(X))
    else:
        raise TypeError(f"expected a NetworkCase, path or dict, got {type(X).__name__}")
    problems = validate(case)
    if problems:
        raise ValidationError(problems)
    return case


class FrequencyPowerFlow(BaseEstimator):
    """Two-stage frequency-dependent power flow.

    Parameters mirror the solver options. ``stage`` selects which steady
    states are solved when no event script is given: ``"base"`` (nominal
    frequency, slack absorbs), ``"primary"`` (droop only) or ``"both"``
    (droop, then AGC from the post-primary ACE).

    Attributes
    ----------
    results_ : list of StageResult
    df_ : ndarray of frequency deviation (Hz) per solved stage
    ace_ : ndarray of total ACE (MW) per solved stage
    n_iter_ : ndarray of NR iterations per solved stage
    """

    def __init__(self, tol=1e-8, max_iter=200, step_cap=0.1, df_step_cap=0.2,
                 smoothing_hz=0.02, stage="both"):
        self.tol = tol
        self.max_iter = max_iter
        self.step_cap = step_cap
        self.df_step_cap = df_step_cap
        self.smoothing_hz = smoothing_hz
        self.stage = stage

    def _options(self):
        if self.stage not in STAGES:
            raise ValueError(f"stage must be one of {STAGES}, got {self.stage!r}")
        return SolverOptions(
            tol=self.tol, max_iter=self.max_iter, step_cap=self.step_cap,
            df_step_cap=self.df_step_cap, smoothing_hz=self.smoothing_hz,
        )

    def _solve(self, case, events):
        opts = self._options()
        if events:
            return run_timeline(case, events, opts, secondary=self.stage != "primary")
        if self.stage == "base":
            return [run_base(case, flat_start(case), opts)]
        s1 = run_stage1(case, flat_start(case), opts)
        if self.stage == "primary":
            return [s1]
        return [s1, run_stage2(case, s1, opts)]

    def fit(self, X, y=None, events=None):
        case = check_case(X)
        self.case_ = case
        self.results_ = self._solve(case, events)
        self.df_ = np.array([r.df for r in self.results_])
        self.ace_ = np.array([r.total_ace * case.mva_base for r in self.results_])
        self.n_iter_ = np.array([r.report.iterations for r in self.results_])
        return self

    def predict(self, X):
        """Frequency deviation per stage for one case or a sequence of cases."""
        check_is_fitted(self, "results_")
        single = not isinstance(X, (list, tuple))
        cases = [X] if single else list(X)
        out = np.array([[r.df for r in self._solve(check_case(c), None)] for c in cases])
        return out[0] if single else out
