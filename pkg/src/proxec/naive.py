"""Comparators that assume no unmeasured confounding.

An exponential PH outcome model is fitted on the external study with a
chosen adjuster set and transported to the primary trial:
``p = mean_{R=0} [1 - exp(-exp(x_i'g) t)]``. The oracle is the same
pipeline with the latent U added to the adjusters (simulation only).
"""

from __future__ import annotations

import numpy as np

from .dataset import StudyDataset, design, design_names
from .errors import DataError, SchemaError
from .estimating import MomentSystem, Stack
from .incidence import IncidenceEstimate, estimate_stack
from .survival import ee_exponential, fit_exponential

ADJUSTERS = {"X": ("X",), "X-Z-W": ("X", "Z", "W")}
SPECIFICATION = {"X": "Adjust for X", "X-Z-W": "Adjust for X,Z,W"}


def build_stack(ds: StudyDataset, t: float, columns: tuple[str, ...], specification: str = "") -> Stack:
    """Outcome model on R=1 plus the transported incidence, stacked."""
    try:
        X = design(ds, columns)
    except SchemaError as err:
        raise DataError(str(err), {"column": str(err).split()[-1]}) from err
    if np.any(np.isnan(X)):
        raise DataError(f"adjusters {columns} have missing values (apply complete_case first)")
    if ds.n0 == 0:
        raise DataError("no primary-trial records")
    R = ds.study.astype(float)
    ext = R == 1
    names = design_names(ds, columns)
    # adjusters constant on R=1 are aliased with the intercept; drop them
    keep = np.r_[True, np.ptp(X[ext][:, 1:], axis=0) > 0] if ext.any() else np.ones(X.shape[1], bool)
    dropped = [nm for nm, k in zip(names, keep) if not k]
    X, names = X[:, keep], tuple(nm for nm, k in zip(names, keep) if k)
    fit = fit_exponential(ds.time[ext], ds.event[ext], X[ext], names)
    D = ds.event.astype(float)

    def incidence(g):
        return -np.expm1(-np.exp(X @ g) * t)

    p0 = float(np.mean(incidence(fit.coef)[~ext]))
    k = X.shape[1]

    def psi(theta):
        g, p = theta[:k], theta[k]
        return np.hstack([ee_exponential(g, X, ds.time, D, weight=R), ((1 - R) * (incidence(g) - p))[:, None]])

    init = np.append(fit.coef, p0)
    system = MomentSystem(psi, k + 1, (("outcome", k), ("incidence", 1)))
    diag = {"outcome_coef": dict(zip(fit.names, fit.coef.tolist())), "events": fit.events}
    if dropped:
        diag["dropped_constant"] = dropped
    return Stack(system, init, k, diag, ds.n0, ds.n1, specification)


def estimate_naive(ds: StudyDataset, t: float, adjust: str = "X", level: float = 0.95) -> IncidenceEstimate:
    """``adjust`` is ``"X"`` or ``"X-Z-W"``."""
    if adjust not in ADJUSTERS:
        raise ValueError(f"adjust must be one of {sorted(ADJUSTERS)}")
    stack = build_stack(ds, t, ADJUSTERS[adjust], SPECIFICATION[adjust])
    return estimate_stack(stack, "naive", t, level)


def estimate_oracle(ds: StudyDataset, t: float, latent: str = "U", level: float = 0.95) -> IncidenceEstimate:
    if latent not in ds.latent:
        raise DataError(f"oracle needs the latent column {latent!r}", {"column": latent})
    stack = build_stack(ds, t, ("X", latent), f"Adjust for X,{latent}")
    return estimate_stack(stack, "oracle", t, level)
