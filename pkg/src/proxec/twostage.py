"""Two-stage regression estimator under a log-linear NCO model and rare events.

Stage 1 fits ``E(W | R, Z, X) = exp(v'eta)``, ``v = (1, R, Z, X)``, on both
studies with Poisson score equations. Stage 2 fits an exponential PH model
for the event time on the external study with regressors
``(1, X, log W_hat)``. The incidence for a primary-trial record is
``1 - exp(-exp(gamma'(1, X_i, log W_hat(0, Z_i, X_i))) t)``, averaged over R=0.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .dataset import StudyDataset
from .errors import DataError, DegenerateFitError, EstimationError, SingularDesignError
from .estimating import MomentSystem, Stack
from .glm import ee_loglinear, fit_loglinear
from .incidence import IncidenceEstimate, estimate_stack
from .survival import CoxFit, ExpPHFit, ee_exponential, fit_cox, fit_exponential

DEFAULT_T0 = 365.0


@dataclass(frozen=True)
class StageOneFit:
    coef: np.ndarray
    names: tuple[str, ...]
    fitted: np.ndarray  # E(W | R, Z, X) per record
    V: np.ndarray
    interaction: bool
    n_mean_above_one: int

    def log_mean(self, V=None) -> np.ndarray:
        return (self.V if V is None else V) @ self.coef


@dataclass(frozen=True)
class StageTwoFit:
    fit: ExpPHFit | CoxFit
    window: str  # "all" or "truncate(<t0>)"
    t0: float | None
    gamma_w_fixed: float | None = None

    @property
    def coef(self) -> np.ndarray:
        return self.fit.coef


def _stage1_design(ds: StudyDataset, interaction: bool):
    if ds.nce is None or ds.nco is None:
        missing = "Z" if ds.nce is None else "W"
        raise DataError(f"two-stage estimator needs column {missing}", {"column": missing})
    Z, W = ds.nce, ds.nco
    if np.any(np.isnan(Z)) or np.any(np.isnan(W)) or np.any(np.isnan(ds.covariates)):
        raise DataError("Z, W and X must be complete for the two-stage estimator", {"column": "Z"})
    R = ds.study.astype(float)
    cols = [np.ones(len(ds)), R, Z]
    names = ["(Intercept)", "R", "Z"]
    if interaction:
        cols.append(R * Z)
        names.append("R:Z")
    V = np.column_stack([*cols, ds.covariates])
    return V, W, (*names, *ds.schema.covariates)


def fit_stage1(ds: StudyDataset, interaction: bool = False) -> StageOneFit:
    """Log-linear NCO mean model on the combined data."""
    V, W, names = _stage1_design(ds, interaction)
    fit = fit_loglinear(V, W, names)
    mu = fit.mean(V)
    above = int(np.sum(mu > 1))
    if above > 0.05 * len(mu):
        warnings.warn(f"log-linear NCO model: {above} fitted means exceed 1 (log-binomial violation)", stacklevel=2)
    return StageOneFit(fit.coef, tuple(names), mu, V, interaction, above)


def _window(time, event, t0):
    if t0 is None:
        return time, event
    return np.minimum(time, t0), event * (time <= t0)


def _stage2_design(ds: StudyDataset, logw: np.ndarray) -> np.ndarray:
    return np.column_stack([np.ones(len(ds)), ds.covariates, logw])


def fit_stage2(ds: StudyDataset, s1: StageOneFit, t0: float | None = DEFAULT_T0, model: str = "exponential",
               gamma_w: float | None = None) -> StageTwoFit:
    """Stage-2 event-time model on R=1. ``t0=None`` uses all follow-up.

    ``gamma_w`` fixes the log W_hat coefficient (it then enters as an offset).
    """
    ext = ds.study == 1
    time, event = _window(ds.time[ext], ds.event[ext].astype(float), t0)
    logw = s1.log_mean()[ext]
    X2 = _stage2_design(ds.take(np.flatnonzero(ext)), logw)
    names = ("(Intercept)", *ds.schema.covariates, "log W_hat")
    window = "all" if t0 is None else f"truncate({t0:g})"
    if event.sum() == 0:
        raise DegenerateFitError(f"no external events in window {window}")
    if gamma_w is None and np.ptp(logw) == 0:
        raise SingularDesignError("log W_hat is constant on the external study: the NCE Z is non-informative")
    if gamma_w is not None:
        time = time * np.exp(gamma_w * logw)
        X2, names = X2[:, :-1], names[:-1]
    if model == "exponential":
        fit = fit_exponential(time, event, X2, names)
    elif model == "cox":
        fit = fit_cox(time, event, X2[:, 1:], names[1:])
    else:
        raise ValueError(f"unknown stage-2 model {model!r}")
    return StageTwoFit(fit, window, t0, gamma_w)


def _record_incidence(s2: StageTwoFit, X2: np.ndarray, logw: np.ndarray, t: float) -> np.ndarray:
    fit = s2.fit
    if s2.gamma_w_fixed is not None:
        offset = s2.gamma_w_fixed * logw
    else:
        offset = 0.0
    if isinstance(fit, ExpPHFit):
        lam = np.exp(X2 @ fit.coef + offset)
        H = lam * t
    else:
        H = fit.baseline(t) * np.exp(X2[:, 1:] @ fit.coef + offset)
    if not np.all(np.isfinite(H)):
        raise EstimationError("non-finite predicted hazard for a primary-trial record")
    return -np.expm1(-H)


def twostage_point(ds: StudyDataset, s1: StageOneFit, s2: StageTwoFit, t: float) -> float:
    pri = ds.study == 0
    if not pri.any():
        raise DataError("no primary-trial records")
    logw = s1.log_mean()[pri]
    X2 = _stage2_design(ds.take(np.flatnonzero(pri)), logw)
    if s2.gamma_w_fixed is not None:
        X2 = X2[:, :-1]
    return float(np.mean(_record_incidence(s2, X2, logw, t)))


def build_stack(ds: StudyDataset, t: float, t0: float | None = DEFAULT_T0, interaction: bool = False) -> Stack:
    """Stage 1, stage 2 (exponential) and the incidence functional, jointly."""
    if t0 is not None and t > t0:
        raise DataError(f"horizon t={t:g} exceeds the truncation window t0={t0:g}")
    s1 = fit_stage1(ds, interaction)
    s2 = fit_stage2(ds, s1, t0)
    p0 = twostage_point(ds, s1, s2, t)
    V, W, _ = _stage1_design(ds, interaction)
    R = ds.study.astype(float)
    Tw, Dw = _window(ds.time, ds.event.astype(float), t0)
    X = ds.covariates
    one = np.ones(len(ds))
    k1, k2 = V.shape[1], X.shape[1] + 2

    def psi(theta):
        eta, gamma, p = theta[:k1], theta[k1:k1 + k2], theta[-1]
        logw = V @ eta
        X2 = np.column_stack([one, X, logw])
        s2_cols = ee_exponential(gamma, X2, Tw, Dw, weight=R)
        F = -np.expm1(-np.exp(X2 @ gamma) * t)
        return np.hstack([ee_loglinear(eta, V, W), s2_cols, ((1 - R) * (F - p))[:, None]])

    init = np.concatenate([s1.coef, s2.coef, [p0]])
    system = MomentSystem(psi, init.size, (("stage1", k1), ("stage2", k2), ("incidence", 1)))
    diag = {
        "window": s2.window,
        "stage1_coef": dict(zip(s1.names, s1.coef.tolist())),
        "stage2_coef": dict(zip(s2.fit.names, s2.coef.tolist())),
        "n_mean_above_one": s1.n_mean_above_one,
    }
    spec = "1-year" if t0 is not None else "All data"
    return Stack(system, init, init.size - 1, diag, ds.n0, ds.n1, spec)


def estimate_twostage(ds: StudyDataset, t: float, t0: float | None = DEFAULT_T0, model: str = "exponential",
                      interaction: bool = False, level: float = 0.95) -> IncidenceEstimate:
    """Two-stage estimate; exponential stage 2 gets a stacked sandwich SE,
    the Cox stage 2 is point-only (bootstrap for inference)."""
    if model == "exponential":
        return estimate_stack(build_stack(ds, t, t0, interaction), "two-stage", t, level)
    if t0 is not None and t > t0:
        raise DataError(f"horizon t={t:g} exceeds the truncation window t0={t0:g}")
    s1 = fit_stage1(ds, interaction)
    s2 = fit_stage2(ds, s1, t0, model="cox")
    p = twostage_point(ds, s1, s2, t)
    spec = ("1-year" if t0 is not None else "All data") + ", Cox"
    return IncidenceEstimate.from_point("two-stage", t, p, None, level, ds.n0, ds.n1, spec,
                                        {"window": s2.window, "inference": "bootstrap-only"})
