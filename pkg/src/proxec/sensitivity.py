"""Sensitivity bounds for a coarsened confounder and proxy-strength screening.

If the binary coarsening ``U_b`` of the confounder only holds up to an odds
ratio ``Gamma``, the identified incidence ``p`` brackets the truth within
``[p / Gamma^2, Gamma^2 p]``. ``Gamma_1`` governs the outcome bridge and
``Gamma_2`` the treatment bridge; the doubly robust estimate uses the
tighter of the two.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
from scipy.special import ndtr

from .dataset import StudyDataset
from .errors import DataError, DegenerateFitError
from .glm import fit_logistic
from .incidence import IncidenceEstimate, cloglog, z_quantile

WEAK_PROXY_P = 0.05


@dataclass(frozen=True)
class GammaBound:
    gamma: float
    method: str
    estimate: float
    lower: float
    upper: float
    capped: bool
    cloglog_lower: float  # transform of ``upper`` (cloglog is decreasing)
    cloglog_upper: float  # transform of ``lower``
    gamma2: float | None = None

    def to_row(self) -> dict:
        return {"gamma": self.gamma, "gamma2": self.gamma2, "method": self.method, "estimate": self.estimate,
                "lower": self.lower, "upper": self.upper, "capped": self.capped,
                "cloglog_lower": self.cloglog_lower, "cloglog_upper": self.cloglog_upper}


def gamma_bounds(point: IncidenceEstimate, gammas: Iterable[float],
                 gammas2: Sequence[float] | None = None) -> list[GammaBound]:
    """Bounds for each Gamma. For the doubly robust estimate ``gammas2`` pairs
    Gamma_2 with each Gamma_1 (defaulting to the same value)."""
    if not point.valid:
        raise ValueError("Gamma bounds need a valid point estimate in (0, 1)")
    gammas = [float(g) for g in gammas]
    g2 = gammas if gammas2 is None else [float(g) for g in gammas2]
    if len(g2) != len(gammas):
        raise ValueError("gammas2 must have the same length as gammas")
    if point.method not in ("outcome-bridge", "treatment-bridge", "doubly-robust"):
        raise ValueError(f"Gamma bounds apply to the bridge estimators, not {point.method!r}")
    p = point.estimate
    out = []
    for g1, gb in zip(gammas, g2):
        if g1 < 1 or gb < 1:
            raise ValueError(f"Gamma must be >= 1, got {min(g1, gb)}")
        if point.method == "outcome-bridge":
            f = g1**2
        elif point.method == "treatment-bridge":
            f = gb**2
        else:
            f = min(g1, gb) ** 2
        lo, hi = p / f, p * f
        capped = hi >= 1.0
        hi = min(hi, 1.0)
        c_lo = -math.inf if hi >= 1.0 else cloglog(hi)
        out.append(GammaBound(g1, point.method, p, lo, hi, capped, c_lo, cloglog(lo),
                              gb if point.method != "outcome-bridge" else None))
    return out


@dataclass(frozen=True)
class ProxyStrength:
    odds_ratio: float
    ci: tuple[float, float]
    pvalue: float
    weak: bool
    n: int
    subset: str
    coef: dict

    def to_row(self) -> dict:
        return {"subset": self.subset, "n": self.n, "odds_ratio": self.odds_ratio, "ci_lower": self.ci[0],
                "ci_upper": self.ci[1], "pvalue": self.pvalue, "weak_proxy": self.weak}


def proxy_strength(ds: StudyDataset, subset: str = "combined") -> ProxyStrength:
    """Logistic regression of W on (1, Z, X); Wald test of the Z coefficient.

    ``subset`` selects the records: ``"external"`` (R=1), ``"primary"`` (R=0)
    or ``"combined"``. The proxy is flagged weak when p >= 0.05.
    """
    masks = {"external": ds.study == 1, "primary": ds.study == 0, "combined": np.ones(len(ds), bool)}
    if subset not in masks:
        raise ValueError(f"subset must be one of {sorted(masks)}")
    if ds.nce is None or ds.nco is None:
        raise DataError("proxy strength needs both Z and W", {"column": "Z" if ds.nce is None else "W"})
    m = masks[subset] & ~np.isnan(ds.nce) & ~np.isnan(ds.nco) & ~np.any(np.isnan(ds.covariates), axis=1)
    if not m.any():
        raise DataError(f"no complete records in subset {subset!r}")
    W = ds.nco[m]
    if np.all(W == W[0]):
        raise DegenerateFitError("W is constant in the subset; the proxy regression is degenerate")
    X = np.column_stack([np.ones(m.sum()), ds.nce[m], ds.covariates[m]])
    fit = fit_logistic(X, W, ("(Intercept)", "Z", *ds.schema.covariates))
    b, se = fit.coef[1], math.sqrt(fit.cov[1, 1])
    z = b / se
    p = float(2 * ndtr(-abs(z)))
    zq = z_quantile(0.95)
    ci = (math.exp(b - zq * se), math.exp(b + zq * se))
    return ProxyStrength(math.exp(b), ci, p, p >= WEAK_PROXY_P, int(m.sum()), subset,
                         dict(zip(fit.names, fit.coef.tolist())))
