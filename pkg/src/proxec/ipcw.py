"""Proximal IPCW estimators of the counterfactual placebo incidence
``P(T*(0) <= t | R = 0)`` from an external control study (R=1).

With ``Y_w = delta * I(T <= t) / S_c(T; Z, X)`` the IPCW outcome on R=1:

* outcome bridge ``h(W,X) = (1,W,X)'b`` solves, over R=1,
  ``mean[(1,Z,X) * (Y_w - h)] = 0`` and the estimate is ``mean_{R=0} h``;
* treatment bridge ``q(Z,X) = (1,Z,X)'b`` solves, over R=1,
  ``mean[(1,W,X) * (q - (1-e)/e)] = 0`` with ``e = P(R=1|W,X)`` logistic
  (or the all-data form ``mean[(1,W,X) * (R q - (1-R))] = 0``), and the
  estimate is ``mean(R q Y_w) / P(R=0)``;
* the doubly robust form ``mean[R q (Y_w - h) + (1-R) h] / P(R=0)``.

Every estimator is one stacked :class:`MomentSystem`: censoring model,
nuisance blocks, ``P(R=0)`` and the incidence. Bridges are linear in their
coefficients, so warm starts are exact least-squares-type solves.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit
from scipy.stats import chi2

from .dataset import StudyDataset
from .errors import DataError, EstimationError, SingularDesignError, WeakProxyError
from .estimating import MomentSystem, SolvedSystem, Stack
from .glm import ee_logistic, fit_logistic
from .incidence import IncidenceEstimate, estimate_stack
from .survival import SURV_FLOOR, CoxFit, ExpPHFit, censor_survival, ee_exponential, fit_cox, fit_exponential

BRIDGE_COND_MAX = 1e12
POSITIVITY_MIN = 0.01


# --------------------------------------------------------------------------
# design bookkeeping


def _interact(a: np.ndarray, X: np.ndarray) -> np.ndarray:
    return a[:, None] * X


@dataclass(frozen=True)
class Design:
    """Arrays shared by every IPCW estimator for one dataset.

    Missing Z on R=0 records is allowed (Z only enters through R=1 terms);
    it is zero-filled after checking that the R=1 subset is complete.
    """

    R: np.ndarray
    T: np.ndarray
    D: np.ndarray
    Vc: np.ndarray  # censoring regressors (1, Z, X)
    H: np.ndarray  # h regressors (1, W, X[, W*X])
    Gh: np.ndarray  # h instruments (1, Z, X[, Z*X])
    Q: np.ndarray  # q regressors (1, Z, X[, Z*X])
    Gq: np.ndarray  # q instruments (1, W, X[, W*X])
    M: np.ndarray  # logistic P(R=1|W,X) design
    h_names: tuple[str, ...]
    q_names: tuple[str, ...]
    c_names: tuple[str, ...]

    @property
    def n(self) -> int:
        return self.R.size


def build_design(ds: StudyDataset, interactions: bool = False) -> Design:
    if ds.nce is None or ds.nco is None:
        missing = "Z" if ds.nce is None else "W"
        raise DataError(f"IPCW estimators need column {missing}", {"column": missing})
    if ds.n0 == 0 or ds.n1 == 0:
        raise DataError("IPCW estimators need records from both studies")
    R = ds.study.astype(float)
    ext = R == 1
    X = ds.covariates
    Z, W = ds.nce, ds.nco
    if np.any(np.isnan(Z[ext])):
        raise DataError("Z has missing values among external records", {"column": "Z"})
    if np.any(np.isnan(W)) or np.any(np.isnan(X)):
        raise DataError("W and X must be complete (apply complete_case first)", {"column": "W"})
    Z = np.where(ext, Z, 0.0)
    one = np.ones_like(R)
    xn = list(ds.schema.covariates)
    Vc = np.column_stack([one, Z, X])
    H = np.column_stack([one, W, X])
    Gh = np.column_stack([one, Z, X])
    Q = Gh.copy()
    Gq = H.copy()
    hn = ["(Intercept)", "W", *xn]
    qn = ["(Intercept)", "Z", *xn]
    if interactions and X.shape[1]:
        H = np.column_stack([H, _interact(W, X)])
        Gh = np.column_stack([Gh, _interact(Z, X)])
        Q = np.column_stack([Q, _interact(Z, X)])
        Gq = np.column_stack([Gq, _interact(W, X)])
        hn += [f"W:{c}" for c in xn]
        qn += [f"Z:{c}" for c in xn]
    return Design(R, ds.time, ds.event.astype(float), Vc, H, Gh, Q, Gq, Gq.copy(),
                  tuple(hn), tuple(qn), ("(Intercept)", "Z", *xn))


def ipcw_outcome(d: Design, t: float, surv: np.ndarray) -> np.ndarray:
    """``R * delta * I(T <= t) / S_c``; zero off the external study."""
    return d.R * d.D * (d.T <= t) / surv


def _exp_surv(d: Design, gamma: np.ndarray) -> np.ndarray:
    return np.maximum(np.exp(-d.T * np.exp(d.Vc @ gamma)), SURV_FLOOR)


# --------------------------------------------------------------------------
# censoring


def fit_censoring(ds: StudyDataset, model: str = "exponential", interactions: bool = False) -> ExpPHFit | CoxFit:
    """Censoring-time model on the external study with covariates (Z, X)."""
    d = build_design(ds, interactions)
    ext = d.R == 1
    if model == "exponential":
        return fit_exponential(d.T[ext], 1 - d.D[ext], d.Vc[ext], names=d.c_names)
    if model == "cox":
        return fit_cox(d.T[ext], d.D[ext], d.Vc[ext, 1:], names=d.c_names[1:], outcome="censoring")
    raise ValueError(f"unknown censoring model {model!r}")


def _censor_values(d: Design, censor: ExpPHFit | CoxFit):
    X = d.Vc if isinstance(censor, ExpPHFit) else d.Vc[:, 1:]
    cs = censor_survival(censor, d.T, X)
    ext = d.R == 1
    diag = {
        "censoring_model": "exponential" if isinstance(censor, ExpPHFit) else "cox",
        "n_floored": int(np.sum(cs.floored & ext)),
        "n_extrapolated": int(np.sum(cs.extrapolated & ext)),
    }
    return cs.values, diag


# --------------------------------------------------------------------------
# bridges


@dataclass(frozen=True)
class BridgeSpec:
    kind: str  # "outcome-h" or "treatment-q"
    regressors: tuple[str, ...]
    instruments: tuple[str, ...]

    def __post_init__(self):
        if len(self.regressors) != len(self.instruments):
            raise ValueError("bridge must be just-identified")


@dataclass(frozen=True)
class BridgeFit:
    spec: BridgeSpec
    coef: np.ndarray
    fitted: np.ndarray  # per-record values over the whole dataset
    solved: SolvedSystem | None = None
    diagnostics: dict = field(default_factory=dict)


def _linear_bridge(G: np.ndarray, B: np.ndarray, y: np.ndarray, weight: np.ndarray, label: str):
    """Solve ``sum(weight * G * (B b - y)) = 0`` for b, checking instrument strength."""
    A = (G * weight[:, None]).T @ B
    rhs = (G * weight[:, None]).T @ y
    cond = float(np.linalg.cond(A))
    diag = {"cross_moment_cond": cond}
    diag.update(_canonical_strength(G[weight > 0], B[weight > 0]))
    if not np.isfinite(cond) or cond > BRIDGE_COND_MAX:
        raise WeakProxyError(
            f"{label} system is singular: the negative controls carry no joint information "
            "(check proxy_strength)", diag)
    if diag["weak_instrument"]:
        warnings.warn(f"{label}: instruments weakly related to regressors "
                      f"(rank-test p = {diag['rank_test_p']:.3g}); see proxy_strength", stacklevel=3)
    return np.linalg.solve(A, rhs), diag


def _canonical_strength(G: np.ndarray, B: np.ndarray) -> dict:
    """Smallest canonical correlation between instruments and regressors after
    removing shared columns, with an ``n * rho^2`` chi-square(1) rank test."""
    n = G.shape[0]
    Gc = G - G.mean(axis=0)
    Bc = B - B.mean(axis=0)
    keep_g = np.std(Gc, axis=0) > 0
    keep_b = np.std(Bc, axis=0) > 0
    Gc, Bc = Gc[:, keep_g], Bc[:, keep_b]
    if Gc.shape[1] == 0 or Bc.shape[1] == 0:
        return {"min_canonical_corr": None, "rank_test_p": None, "weak_instrument": False}
    qg, _ = np.linalg.qr(Gc)
    qb, _ = np.linalg.qr(Bc)
    s = np.linalg.svd(qg.T @ qb, compute_uv=False)
    rho = float(np.clip(s.min(), 0.0, 1.0)) if s.size else 0.0
    pval = float(chi2.sf(n * rho**2, 1))
    return {"min_canonical_corr": rho, "rank_test_p": pval, "weak_instrument": pval >= 0.05}


H_SPEC = BridgeSpec("outcome-h", ("1", "W", "X"), ("1", "Z", "X"))
Q_SPEC = BridgeSpec("treatment-q", ("1", "Z", "X"), ("1", "W", "X"))


def fit_h(ds: StudyDataset, t: float, censor: ExpPHFit | CoxFit | None = None, interactions: bool = False) -> BridgeFit:
    """Outcome bridge from the external study's empirical moment."""
    d = build_design(ds, interactions)
    if censor is None:
        censor = fit_censoring(ds)
    surv, cdiag = _censor_values(d, censor)
    beta, diag = _linear_bridge(d.Gh, d.H, ipcw_outcome(d, t, surv), d.R, "outcome bridge")
    return BridgeFit(H_SPEC, beta, d.H @ beta, None, {**diag, **cdiag, "names": list(d.h_names)})


def fit_propensity(d: Design):
    fit = fit_logistic(d.M, d.R)
    e = fit.predict(d.M)
    n_small = int(np.sum(e < POSITIVITY_MIN))
    if n_small:
        warnings.warn(f"positivity: {n_small} records have P(R=1|W,X) < {POSITIVITY_MIN}", stacklevel=3)
    return fit, n_small


def fit_q(ds: StudyDataset, q_moment: str = "external", interactions: bool = False) -> BridgeFit:
    """Treatment bridge; ``q_moment`` is ``"external"`` (odds from a logistic
    fit, R=1 records) or ``"alldata"``."""
    d = build_design(ds, interactions)
    return _fit_q(d, q_moment)


def _fit_q(d: Design, q_moment: str) -> BridgeFit:
    if q_moment == "external":
        lfit, n_small = fit_propensity(d)
        e = lfit.predict(d.M)
        beta, diag = _linear_bridge(d.Gq, d.Q, (1 - e) / e, d.R, "treatment bridge")
        diag.update(propensity_coef=lfit.coef.tolist(), n_positivity=n_small)
    elif q_moment == "alldata":
        # sum g (R q - (1-R)) = 0
        A = d.Gq.T @ (d.Q * d.R[:, None])
        rhs = d.Gq.T @ (1 - d.R)
        cond = float(np.linalg.cond(A))
        diag = {"cross_moment_cond": cond}
        diag.update(_canonical_strength(d.Gq[d.R == 1], d.Q[d.R == 1]))
        if not np.isfinite(cond) or cond > BRIDGE_COND_MAX:
            raise WeakProxyError("treatment bridge system is singular (check proxy_strength)", diag)
        beta = np.linalg.solve(A, rhs)
    else:
        raise ValueError(f"q_moment must be 'external' or 'alldata', got {q_moment!r}")
    diag["q_moment"] = q_moment
    diag["names"] = list(d.q_names)
    return BridgeFit(Q_SPEC, beta, d.Q @ beta, None, diag)


# --------------------------------------------------------------------------
# functionals (closed forms, used for warm starts and algebraic checks)


def ob_functional(R, h) -> float:
    return float(np.sum((1 - R) * h) / np.sum(1 - R))


def tb_functional(R, q, yw) -> float:
    return float(np.sum(R * q * yw) / np.sum(1 - R))


def dr_functional(R, q, h, yw) -> float:
    return float(np.sum(R * q * (yw - h) + (1 - R) * h) / np.sum(1 - R))


# --------------------------------------------------------------------------
# stacked systems


def _blocks(*pairs):
    return tuple((k, v) for k, v in pairs if v > 0)


def build_stack(ds: StudyDataset, method: str, t: float, censor: str = "exponential",
                q_moment: str = "external", interactions: bool = False) -> Stack:
    """Stacked system for ``method`` in outcome-bridge, treatment-bridge, doubly-robust.

    With ``censor="cox"`` the censoring survival is plugged in as fixed and
    the sandwich ignores its estimation (use the bootstrap instead).
    """
    if method not in ("outcome-bridge", "treatment-bridge", "doubly-robust"):
        raise ValueError(f"unknown IPCW method {method!r}")
    d = build_design(ds, interactions)
    cfit = fit_censoring(ds, censor, interactions)
    surv0, cdiag = _censor_values(d, cfit)
    yw0 = ipcw_outcome(d, t, surv0)
    stacked_c = isinstance(cfit, ExpPHFit)
    ext = d.R
    use_h = method != "treatment-bridge"
    use_q = method != "outcome-bridge"
    use_logit = use_q and q_moment == "external"

    diag = dict(cdiag)
    init = [cfit.coef] if stacked_c else []
    if use_logit:
        lfit, n_small = fit_propensity(d)
        init.append(lfit.coef)
        diag["n_positivity"] = n_small
    if use_h:
        hb, hd = _linear_bridge(d.Gh, d.H, yw0, ext, "outcome bridge")
        init.append(hb)
        diag["h"] = hd
    if use_q:
        qfit = _fit_q(d, q_moment)
        init.append(qfit.coef)
        diag["q"] = {k: v for k, v in qfit.diagnostics.items() if k != "names"}
    pi0 = float(np.mean(1 - d.R))
    init.append([pi0])

    h0 = d.H @ hb if use_h else 0.0
    q0 = d.Q @ init[-2] if use_q else 0.0
    if method == "outcome-bridge":
        p0 = ob_functional(d.R, h0)
    elif method == "treatment-bridge":
        p0 = tb_functional(d.R, q0, yw0)
    else:
        p0 = dr_functional(d.R, q0, h0, yw0)
    init.append([p0])
    theta0 = np.concatenate([np.atleast_1d(np.asarray(a, dtype=float)) for a in init])

    kc = d.Vc.shape[1] if stacked_c else 0
    km = d.M.shape[1] if use_logit else 0
    kh = d.H.shape[1] if use_h else 0
    kq = d.Q.shape[1] if use_q else 0
    cuts = np.cumsum([0, kc, km, kh, kq, 1, 1])
    sl = [slice(a, b) for a, b in zip(cuts[:-1], cuts[1:])]
    Dc = 1 - d.D

    def psi(theta):
        cols = []
        if stacked_c:
            gamma = theta[sl[0]]
            cols.append(ee_exponential(gamma, d.Vc, d.T, Dc, weight=ext))
            yw = ipcw_outcome(d, t, _exp_surv(d, gamma))
        else:
            yw = yw0
        if use_logit:
            alpha = theta[sl[1]]
            cols.append(ee_logistic(alpha, d.M, d.R))
            e = expit(d.M @ alpha)
        h = q = 0.0
        if use_h:
            h = d.H @ theta[sl[2]]
            cols.append(d.Gh * (ext * (yw - h))[:, None])
        if use_q:
            q = d.Q @ theta[sl[3]]
            if use_logit:
                cols.append(d.Gq * (ext * (q - (1 - e) / e))[:, None])
            else:
                cols.append(d.Gq * (d.R * q - (1 - d.R))[:, None])
        pi0_ = theta[sl[4]][0]
        p = theta[sl[5]][0]
        cols.append(((1 - d.R) - pi0_)[:, None])
        if method == "outcome-bridge":
            # pi0 * p = mean((1-R) h), written per record
            cols.append(((1 - d.R) * h - pi0_ * p)[:, None])
        elif method == "treatment-bridge":
            cols.append((d.R * q * yw - pi0_ * p)[:, None])
        else:
            cols.append((d.R * q * (yw - h) + (1 - d.R) * h - pi0_ * p)[:, None])
        return np.hstack(cols)

    system = MomentSystem(psi, int(cuts[-1]), _blocks(
        ("censoring", kc), ("propensity", km), ("h-bridge", kh), ("q-bridge", kq), ("p_r0", 1), ("incidence", 1)))
    spec = {"outcome-bridge": "Outcome bridge", "treatment-bridge": "Propensity bridge",
            "doubly-robust": "Doubly robust"}[method]
    diag["interactions"] = interactions
    if use_q:
        diag["q_moment"] = q_moment
    return Stack(system, theta0, int(cuts[-1]) - 1, diag, ds.n0, ds.n1, spec, sandwich=stacked_c)


def _solve_estimate(stack: Stack, method: str, t: float, level: float) -> IncidenceEstimate:
    try:
        return estimate_stack(stack, method, t, level)
    except SingularDesignError as err:
        if isinstance(err, WeakProxyError):
            raise
        raise WeakProxyError(f"{method}: {err} (check proxy_strength)", err.diagnostics) from err


def _estimate(ds, t, method, censor, q_moment, interactions, level):
    stack = build_stack(ds, method, t, censor, q_moment, interactions)
    return _solve_estimate(stack, method, t, level)


def estimate_outcome_bridge(ds: StudyDataset, t: float, censor: str = "exponential",
                            interactions: bool = False, level: float = 0.95) -> IncidenceEstimate:
    return _estimate(ds, t, "outcome-bridge", censor, "external", interactions, level)


def estimate_treatment_bridge(ds: StudyDataset, t: float, censor: str = "exponential", q_moment: str = "external",
                              interactions: bool = False, level: float = 0.95) -> IncidenceEstimate:
    return _estimate(ds, t, "treatment-bridge", censor, q_moment, interactions, level)


def estimate_doubly_robust(ds: StudyDataset, t: float, censor: str = "exponential", q_moment: str = "external",
                           interactions: bool = False, level: float = 0.95) -> IncidenceEstimate:
    return _estimate(ds, t, "doubly-robust", censor, q_moment, interactions, level)


def point_estimate(ds: StudyDataset, t: float, method: str, censor: str = "exponential",
                   q_moment: str = "external", interactions: bool = False) -> float:
    """Closed-form point estimate only (no joint solve); used by the bootstrap."""
    p = build_stack(ds, method, t, censor, q_moment, interactions).point
    if not np.isfinite(p):
        raise EstimationError("non-finite estimate")
    return p
