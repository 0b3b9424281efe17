"""Cumulative-incidence estimates and the complementary log-log scale.

The transformed value is ``theta = log(-log(p))`` for an incidence ``p``.
It is decreasing in ``p``, so interval endpoints swap on back-transformation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

from scipy.special import ndtri

from .errors import InvalidEstimateError
from .estimating import Stack, solve

METHODS = ("outcome-bridge", "treatment-bridge", "doubly-robust", "two-stage", "naive", "oracle", "km", "arm-ipcw")


def cloglog(p: float) -> float:
    return math.log(-math.log(p))


def inv_cloglog(theta: float) -> float:
    return math.exp(-math.exp(theta))


def cloglog_grad(p: float) -> float:
    """d/dp log(-log p) = 1 / (p log p)."""
    return 1.0 / (p * math.log(p))


def z_quantile(level: float) -> float:
    return float(ndtri(1 - (1 - level) / 2))


def cloglog_ci(p: float, se_theta: float, level: float = 0.95) -> tuple[float, float]:
    """Interval for an incidence built on the cloglog scale, returned ascending."""
    if not 0.0 < p < 1.0:
        raise InvalidEstimateError(f"estimate {p!r} is outside (0, 1)")
    th = cloglog(p)
    z = z_quantile(level)
    a, b = inv_cloglog(th + z * se_theta), inv_cloglog(th - z * se_theta)
    return (min(a, b), max(a, b))


@dataclass(frozen=True)
class IncidenceEstimate:
    method: str
    t: float
    estimate: float
    valid: bool
    se: float | None = None  # probability scale
    cloglog: float | None = None
    se_cloglog: float | None = None
    ci_cloglog: tuple[float, float] | None = None
    ci_prob: tuple[float, float] | None = None
    level: float = 0.95
    n0: int = 0
    n1: int = 0
    specification: str = ""
    diagnostics: dict = field(default_factory=dict)

    @classmethod
    def from_point(cls, method, t, p, se=None, level=0.95, n0=0, n1=0, specification="", diagnostics=None):
        p = float(p)
        diagnostics = dict(diagnostics or {})
        if not (0.0 < p < 1.0) or not math.isfinite(p):
            return cls(method, float(t), p, False, se=se, level=level, n0=n0, n1=n1,
                       specification=specification, diagnostics=diagnostics)
        th = cloglog(p)
        se_th = ci_th = ci_p = None
        if se is not None and math.isfinite(se):
            se_th = abs(se * cloglog_grad(p))
            z = z_quantile(level)
            ci_th = (th - z * se_th, th + z * se_th)
            ci_p = cloglog_ci(p, se_th, level)
        return cls(method, float(t), p, True, se=se, cloglog=th, se_cloglog=se_th, ci_cloglog=ci_th,
                   ci_prob=ci_p, level=level, n0=n0, n1=n1, specification=specification, diagnostics=diagnostics)

    def covers(self, truth: float) -> bool | None:
        if self.ci_prob is None:
            return None
        return self.ci_prob[0] <= truth <= self.ci_prob[1]

    def to_json(self) -> dict:
        return {
            "method": self.method,
            "specification": self.specification,
            "t": self.t,
            "estimate": self.estimate,
            "cloglog": self.cloglog,
            "se_cloglog": self.se_cloglog,
            "ci_prob": list(self.ci_prob) if self.ci_prob else None,
            "valid": self.valid,
            "n0": self.n0,
            "n1": self.n1,
            "diagnostics": self.diagnostics,
        }


def estimate_stack(stack: Stack, method: str, t: float, level: float = 0.95) -> IncidenceEstimate:
    """Solve a stack and wrap its target as an incidence estimate.

    The SE comes from the sandwich only when every nuisance fit is stacked.
    """
    sol = solve(stack.system, stack.init)
    p = float(sol.theta[stack.target])
    se = float(sol.se[stack.target]) if stack.sandwich else None
    diag = {**stack.diagnostics, **sol.diagnostics()}
    if not stack.sandwich:
        diag["inference"] = "bootstrap-only"
    return IncidenceEstimate.from_point(method, t, p, se=se, level=level, n0=stack.n0, n1=stack.n1,
                                        specification=stack.specification, diagnostics=diag)
