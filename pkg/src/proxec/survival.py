"""Survival and censoring models.

* exponential proportional hazards, ``lambda(x) = exp(x'b)``, fitted by
  maximum likelihood on ``sum(delta * eta - T * exp(eta))``;
* Cox partial likelihood with Breslow ties and Breslow baseline hazard;
* Kaplan-Meier with Greenwood variance.

Censoring models are the same fits with the event indicator flipped.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateFitError, SingularDesignError
from .glm import check_design, newton_maximize
from .incidence import IncidenceEstimate

SURV_FLOOR = 1e-6


# --------------------------------------------------------------------------
# exponential PH


def ee_exponential(beta, X, time, event, weight=None):
    """Per-record score of the exponential PH log-likelihood."""
    r = event - time * np.exp(X @ beta)
    if weight is not None:
        r = r * weight
    return r[:, None] * X


def exponential_loglik(beta, X, time, event) -> float:
    eta = X @ beta
    return float(np.sum(event * eta - time * np.exp(eta)))


def exponential_score(beta, X, time, event) -> np.ndarray:
    return X.T @ (event - time * np.exp(X @ beta))


def exponential_info(beta, X, time, event) -> np.ndarray:
    return (X * (time * np.exp(X @ beta))[:, None]).T @ X


@dataclass(frozen=True)
class ExpPHFit:
    coef: np.ndarray
    cov_model: np.ndarray
    cov_robust: np.ndarray
    names: tuple[str, ...] = ()
    iterations: int = 0
    events: int = 0

    def rate(self, X) -> np.ndarray:
        return np.exp(np.asarray(X) @ self.coef)

    def cumulative_hazard(self, time, X) -> np.ndarray:
        return np.asarray(time, dtype=float) * self.rate(X)

    def to_json(self) -> dict:
        return {
            "model": "exponential",
            "names": list(self.names),
            "coef": self.coef.tolist(),
            "se_model": np.sqrt(np.diag(self.cov_model)).tolist(),
            "se_robust": np.sqrt(np.diag(self.cov_robust)).tolist(),
            "events": self.events,
        }


def fit_exponential(time, event, X, names=None, tol=1e-9, max_iter=50) -> ExpPHFit:
    """Maximum-likelihood exponential PH fit; ``X`` should carry an intercept column."""
    time = np.asarray(time, dtype=float)
    event = np.asarray(event, dtype=float)
    X = np.asarray(X, dtype=float)
    d = int(event.sum())
    if d == 0:
        raise DegenerateFitError("no events: exponential rate is not estimable")
    check_design(X, "exponential PH design")
    b0 = np.zeros(X.shape[1])
    if np.allclose(X[:, 0], 1.0):
        b0[0] = np.log(d / time.sum())
    beta, it = newton_maximize(
        lambda b: exponential_loglik(b, X, time, event),
        lambda b: exponential_score(b, X, time, event),
        lambda b: exponential_info(b, X, time, event),
        b0, tol, max_iter, len(time),
    )
    info = exponential_info(beta, X, time, event)
    inv = np.linalg.inv(info)
    psi = ee_exponential(beta, X, time, event)
    robust = inv @ (psi.T @ psi) @ inv
    return ExpPHFit(beta, (inv + inv.T) / 2, (robust + robust.T) / 2, tuple(names or ()), it, d)


# --------------------------------------------------------------------------
# Cox PH, Breslow ties


class _RiskSets:
    """Sorted-time bookkeeping; the risk set of record i is everyone with T >= T_i."""

    def __init__(self, time, event, X):
        order = np.argsort(time, kind="stable")
        self.t = time[order]
        self.d = event[order]
        self.X = X[order]
        self.first = np.searchsorted(self.t, self.t, side="left")

    def _rev(self, a):
        return np.cumsum(a[::-1], axis=0)[::-1][self.first]

    def sums(self, beta, second=False):
        w = np.exp(self.X @ beta)
        S0 = self._rev(w)
        S1 = self._rev(w[:, None] * self.X)
        S2 = self._rev(w[:, None, None] * self.X[:, :, None] * self.X[:, None, :]) if second else None
        return w, S0, S1, S2

    def loglik(self, beta):
        _, S0, _, _ = self.sums(beta)
        ev = self.d == 1
        return float(np.sum((self.X @ beta)[ev] - np.log(S0[ev])))

    def score(self, beta):
        _, S0, S1, _ = self.sums(beta)
        ev = self.d == 1
        return np.sum(self.X[ev] - S1[ev] / S0[ev, None], axis=0)

    def info(self, beta):
        _, S0, S1, S2 = self.sums(beta, second=True)
        ev = self.d == 1
        m = S1[ev] / S0[ev, None]
        return np.sum(S2[ev] / S0[ev, None, None] - m[:, :, None] * m[:, None, :], axis=0)


@dataclass(frozen=True)
class CoxFit:
    coef: np.ndarray
    cov: np.ndarray
    event_times: np.ndarray  # distinct event times, ascending
    cumhaz: np.ndarray  # Breslow baseline cumulative hazard at event_times
    names: tuple[str, ...] = ()
    iterations: int = 0
    outcome: str = "event"

    @property
    def last_event_time(self) -> float:
        return float(self.event_times[-1])

    def baseline(self, time) -> np.ndarray:
        """Step function H0(t), right-continuous with H0(0) = 0."""
        idx = np.searchsorted(self.event_times, np.asarray(time, dtype=float), side="right")
        return np.concatenate([[0.0], self.cumhaz])[idx]

    def cumulative_hazard(self, time, X) -> np.ndarray:
        X = np.asarray(X, dtype=float).reshape(len(np.atleast_1d(time)), -1)
        return self.baseline(time) * np.exp(X @ self.coef)

    def to_json(self) -> dict:
        return {
            "model": "cox",
            "outcome": self.outcome,
            "names": list(self.names),
            "coef": self.coef.tolist(),
            "se": np.sqrt(np.diag(self.cov)).tolist() if self.coef.size else [],
            "event_times": self.event_times.tolist(),
            "cumhaz": self.cumhaz.tolist(),
        }


def fit_cox(time, event, X, names=None, outcome: str = "event", tol=1e-9, max_iter=50) -> CoxFit:
    """Cox model by Newton on the Breslow partial likelihood.

    ``outcome="censoring"`` models the censoring time by flipping ``event``.
    ``X`` must not contain an intercept; it may have zero columns.
    """
    time = np.asarray(time, dtype=float)
    event = np.asarray(event, dtype=float)
    if outcome == "censoring":
        event = 1.0 - event
    elif outcome != "event":
        raise ValueError(f"outcome must be 'event' or 'censoring', got {outcome!r}")
    X = np.asarray(X, dtype=float).reshape(len(time), -1)
    if event.sum() == 0:
        raise DegenerateFitError(f"no {'censoring ' if outcome == 'censoring' else ''}events to fit")
    p = X.shape[1]
    if p:
        if not np.all(np.isfinite(X)):
            raise SingularDesignError("Cox design has non-finite values")
        Xc = X - X.mean(axis=0)
        if np.linalg.matrix_rank(Xc) < p:
            raise SingularDesignError("Cox design is rank deficient (constant or collinear covariate)")
    rs = _RiskSets(time, event, X)
    if p:
        beta, it = newton_maximize(rs.loglik, rs.score, rs.info, np.zeros(p), tol, max_iter, len(time))
        cov = np.linalg.inv(rs.info(beta))
    else:
        beta, it, cov = np.zeros(0), 0, np.zeros((0, 0))
    _, S0, _, _ = rs.sums(beta)
    ev = rs.d == 1
    times, inverse = np.unique(rs.t[ev], return_inverse=True)
    # one risk-set sum per distinct event time
    # tied events share a risk set, so each contributes 1/S0 of it
    dH = np.bincount(inverse, weights=1.0 / S0[ev])
    return CoxFit(beta, (cov + cov.T) / 2, times, np.cumsum(dH), tuple(names or ()), it, outcome)


# --------------------------------------------------------------------------
# censoring survival


@dataclass(frozen=True)
class CensorSurvival:
    values: np.ndarray
    floored: np.ndarray  # bool mask
    extrapolated: np.ndarray  # bool mask, Cox only

    @property
    def n_floored(self) -> int:
        return int(self.floored.sum())

    @property
    def n_extrapolated(self) -> int:
        return int(self.extrapolated.sum())


def censor_survival(fit: ExpPHFit | CoxFit, time, X, floor: float = SURV_FLOOR) -> CensorSurvival:
    """exp(-H(T; x)) at each record's own time, floored at ``floor``.

    For a Cox fit, times past the last censoring event keep the last step
    value and are flagged as extrapolated.
    """
    time = np.asarray(time, dtype=float)
    raw = np.exp(-fit.cumulative_hazard(time, X))
    if isinstance(fit, CoxFit):
        extrap = time > fit.last_event_time
    else:
        extrap = np.zeros(time.shape, dtype=bool)
    floored = raw < floor
    return CensorSurvival(np.maximum(raw, floor), floored, extrap)


# --------------------------------------------------------------------------
# Kaplan-Meier


@dataclass(frozen=True)
class KMCurve:
    times: np.ndarray  # distinct event times
    surv: np.ndarray
    var: np.ndarray  # Greenwood variance of surv
    at_risk: np.ndarray
    events: np.ndarray
    max_time: float = field(default=np.inf)

    def __call__(self, t) -> np.ndarray:
        idx = np.searchsorted(self.times, np.asarray(t, dtype=float), side="right")
        return np.concatenate([[1.0], self.surv])[idx]

    def variance(self, t) -> np.ndarray:
        idx = np.searchsorted(self.times, np.asarray(t, dtype=float), side="right")
        return np.concatenate([[0.0], self.var])[idx]


def kaplan_meier(time, event) -> KMCurve:
    """Product-limit estimator with Greenwood's variance formula."""
    time = np.asarray(time, dtype=float)
    event = np.asarray(event, dtype=int)
    if time.size == 0:
        raise DegenerateFitError("Kaplan-Meier needs at least one record")
    ts = np.sort(time)
    times = np.unique(time[event == 1])
    d = np.bincount(np.searchsorted(times, time[event == 1]), minlength=times.size)
    n = ts.size - np.searchsorted(ts, times, side="left")
    surv = np.cumprod(1.0 - d / n)
    with np.errstate(divide="ignore", invalid="ignore"):
        term = np.where(n > d, d / (n * (n - d)), np.inf)
        var = surv**2 * np.cumsum(term)
    var = np.where(np.isfinite(var), var, 0.0)
    return KMCurve(times, surv, var, n, d, float(ts[-1]))


def km_incidence(time, event, t: float, level: float = 0.95, specification: str = "") -> IncidenceEstimate:
    """1 - KM(t); Greenwood SE goes through the cloglog transform."""
    time = np.asarray(time, dtype=float)
    curve = kaplan_meier(time, event)
    diag = {"events_by_t": int(np.sum(curve.events[curve.times <= t]))}
    if t > curve.max_time:
        diag["beyond_follow_up"] = True
    p = float(1.0 - curve(t))
    if diag["events_by_t"] == 0:
        diag["degenerate_se"] = True
        return IncidenceEstimate.from_point("km", t, 0.0, se=0.0, level=level, n0=len(time),
                                            specification=specification, diagnostics=diag)
    se = float(np.sqrt(curve.variance(t)))
    return IncidenceEstimate.from_point("km", t, p, se=se, level=level, n0=len(time),
                                        specification=specification, diagnostics=diag)
