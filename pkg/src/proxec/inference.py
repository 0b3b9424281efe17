"""Confidence intervals on the cloglog scale and Wald efficacy tests.

The efficacy test stacks an arm-incidence moment,
``I(R=0, A=a) * (delta I(T<=t) / S_c,a(T) - p_a)`` with its own exponential
censoring model, next to every moment of the placebo estimator, so the
sandwich carries the covariance induced by shared primary-trial records.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.special import ndtr

from . import ipcw, naive, twostage
from .dataset import StudyDataset
from .errors import DataError, DegenerateFitError, InvalidEstimateError
from .estimating import MomentSystem, SolvedSystem, Stack, join_solutions, solve
from .incidence import cloglog, cloglog_ci, cloglog_grad, estimate_stack  # noqa: F401  (re-export)
from .survival import SURV_FLOOR, ee_exponential, fit_exponential

# CLI code -> (method tag, stack builder(ds, t, options))
PLACEBO_METHODS: dict[str, tuple[str, Callable[..., Stack]]] = {
    "ob": ("outcome-bridge", lambda ds, t, o: ipcw.build_stack(ds, "outcome-bridge", t, o.get("censor", "exponential"),
                                                                interactions=o.get("interactions", False))),
    "tb": ("treatment-bridge", lambda ds, t, o: ipcw.build_stack(ds, "treatment-bridge", t,
                                                                  o.get("censor", "exponential"),
                                                                  o.get("q_moment", "external"),
                                                                  o.get("interactions", False))),
    "dr": ("doubly-robust", lambda ds, t, o: ipcw.build_stack(ds, "doubly-robust", t, o.get("censor", "exponential"),
                                                               o.get("q_moment", "external"),
                                                               o.get("interactions", False))),
    "ts1y": ("two-stage", lambda ds, t, o: twostage.build_stack(ds, t, o.get("t0", twostage.DEFAULT_T0),
                                                                 o.get("interaction", False))),
    "tsall": ("two-stage", lambda ds, t, o: twostage.build_stack(ds, t, None, o.get("interaction", False))),
    "naive-x": ("naive", lambda ds, t, o: naive.build_stack(ds, t, naive.ADJUSTERS["X"], naive.SPECIFICATION["X"])),
    "naive-xzw": ("naive", lambda ds, t, o: naive.build_stack(ds, t, naive.ADJUSTERS["X-Z-W"],
                                                               naive.SPECIFICATION["X-Z-W"])),
    "oracle": ("oracle", lambda ds, t, o: naive.build_stack(ds, t, ("X", "U"), "Adjust for X,U")),
}


def placebo_stack(ds: StudyDataset, code: str, t: float, options: dict | None = None) -> Stack:
    if code not in PLACEBO_METHODS:
        raise ValueError(f"unknown method {code!r}; choose from {sorted(PLACEBO_METHODS)}")
    return PLACEBO_METHODS[code][1](ds, t, options or {})


def estimate(ds: StudyDataset, code: str, t: float, level: float = 0.95, options: dict | None = None):
    """Placebo incidence by CLI method code (``km`` excluded)."""
    return estimate_stack(placebo_stack(ds, code, t, options), PLACEBO_METHODS[code][0], t, level)


# --------------------------------------------------------------------------
# arm incidence


def arm_stack(ds: StudyDataset, arm: int, t: float) -> Stack:
    """IPCW incidence of an active arm with an arm-specific exponential censoring
    model on (Z, X), or X alone when Z is absent or incomplete in the arm."""
    sel = (ds.study == 0) & (ds.arm == arm)
    if not sel.any():
        raise DataError(f"arm {arm} has no primary-trial records")
    if not np.any(ds.event[sel] & (ds.time[sel] <= t)):
        raise DegenerateFitError(f"arm {arm} has no events by t={t:g}; the Wald test is degenerate")
    cols = [np.ones(len(ds))]
    names = ["(Intercept)"]
    if ds.nce is not None and not np.any(np.isnan(ds.nce[sel])):
        cols.append(np.nan_to_num(ds.nce))
        names.append("Z")
    V = np.column_stack([*cols, np.nan_to_num(ds.covariates)])
    names += list(ds.schema.covariates)
    w = sel.astype(float)
    T, D = ds.time, ds.event.astype(float)
    cfit = fit_exponential(T[sel], 1 - D[sel], V[sel], names)
    k = V.shape[1]

    def yw(gamma):
        s = np.maximum(np.exp(-T * np.exp(V @ gamma)), SURV_FLOOR)
        return w * D * (T <= t) / s

    p0 = float(np.sum(yw(cfit.coef)) / w.sum())

    def psi(theta):
        g, p = theta[:k], theta[k]
        return np.hstack([ee_exponential(g, V, T, 1 - D, weight=w), (yw(g) - w * p)[:, None]])

    system = MomentSystem(psi, k + 1, (("arm-censoring", k), ("arm-incidence", 1)))
    return Stack(system, np.append(cfit.coef, p0), k, {"arm": arm, "n_arm": int(sel.sum())}, int(sel.sum()), 0)


# --------------------------------------------------------------------------
# efficacy


def efficacy(p_arm: float, p_placebo: float) -> tuple[float, float]:
    """(relative, absolute) efficacy: ``1 - p_a/p_0`` and ``p_0 - p_a``."""
    return 1.0 - p_arm / p_placebo, p_placebo - p_arm


def wald(theta_arm: float, theta_placebo: float, var_arm: float, var_placebo: float, cov: float):
    """Wald statistic for ``theta_a - theta_0`` and its two-sided normal p-value."""
    se = math.sqrt(max(var_arm + var_placebo - 2 * cov, 0.0))
    if se == 0:
        stat = 0.0 if theta_arm == theta_placebo else math.copysign(math.inf, theta_arm - theta_placebo)
    else:
        stat = (theta_arm - theta_placebo) / se
    return stat, float(2 * ndtr(-abs(stat))), se


@dataclass(frozen=True)
class EfficacyResult:
    arm: int
    method: str
    specification: str
    p_arm: float
    p_placebo: float
    rel_eff: float
    abs_eff: float
    stat: float
    pvalue: float
    se_diff: float

    def to_json(self) -> dict:
        return {"arm": self.arm, "method": self.method, "specification": self.specification,
                "p_arm": self.p_arm, "p_placebo": self.p_placebo, "rel_eff": self.rel_eff,
                "abs_eff": self.abs_eff, "stat": self.stat, "pvalue": self.pvalue}


def efficacy_test(ds: StudyDataset, arm: int, placebo: str | Stack, t: float, options: dict | None = None,
                  placebo_solution: SolvedSystem | None = None) -> EfficacyResult:
    """Joint-sandwich Wald test of arm ``arm`` against the placebo estimator.

    ``placebo`` is a method code from :data:`PLACEBO_METHODS` or a prepared
    stack over ``ds``. The statistic is ``(theta_a - theta_0) / SE`` on the
    cloglog scale, so a protective arm gives a positive value. A solved
    placebo system may be passed to skip re-solving it; it must come from
    the same placebo stack on records aligned with ``ds``.
    """
    if isinstance(placebo, Stack):
        pstack, tag = placebo, "custom"
    else:
        pstack, tag = placebo_stack(ds, placebo, t, options), PLACEBO_METHODS[placebo][0]
    if not pstack.sandwich:
        raise ValueError("placebo stack has unstacked nuisance fits; the joint sandwich is unavailable")
    astack = arm_stack(ds, arm, t)
    psol = placebo_solution if placebo_solution is not None else solve(pstack.system, pstack.init)
    asol = solve(astack.system, astack.init)
    sol = join_solutions(psol, asol, prefixes=("placebo:", "arm:"))
    i0, ia = pstack.target, pstack.system.p + astack.target
    p0, pa = float(sol.theta[i0]), float(sol.theta[ia])
    for label, p in (("placebo", p0), ("arm", pa)):
        if not 0 < p < 1:
            raise InvalidEstimateError(f"{label} incidence {p:.4g} is outside (0, 1)", {"p": p})
    g0, ga = cloglog_grad(p0), cloglog_grad(pa)
    V = sol.cov
    stat, pval, se = wald(cloglog(pa), cloglog(p0), ga**2 * V[ia, ia], g0**2 * V[i0, i0], ga * g0 * V[ia, i0])
    rel, ab = efficacy(pa, p0)
    return EfficacyResult(arm, tag, pstack.specification, pa, p0, rel, ab, stat, pval, se)
