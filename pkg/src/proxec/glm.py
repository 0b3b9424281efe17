"""Newton-Raphson maximum likelihood for the small regression models used as
nuisance fits: logistic regression and the log-linear (Poisson-score) mean model.

Each model also exposes its per-record estimating function (``ee_*``) so it
can be stacked into a :class:`~proxec.estimating.MomentSystem`.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit, log_expit

from .errors import ConvergenceError, DegenerateFitError, SingularDesignError


def check_design(X: np.ndarray, what: str = "design") -> None:
    if X.ndim != 2 or X.shape[0] == 0:
        raise SingularDesignError(f"{what} is empty")
    if not np.all(np.isfinite(X)):
        raise SingularDesignError(f"{what} has missing or non-finite values")
    if np.linalg.matrix_rank(X) < X.shape[1]:
        raise SingularDesignError(f"{what} is rank deficient", {"rank": int(np.linalg.matrix_rank(X)), "p": X.shape[1]})


def newton_maximize(loglik, score, info, beta0, tol=1e-9, max_iter=50, n=1):
    """Maximise ``loglik`` by Newton steps with step-halving on a likelihood decrease.

    Converges when the summed score is below ``max(tol, 1e-13 n)`` and the
    Newton step has shrunk below ``1e-7`` (relative); the final step is then
    applied. Returns ``(beta, iterations)``.
    """
    beta = np.array(beta0, dtype=float)
    ll = loglik(beta)
    stol = max(tol, 1e-13 * n)
    for it in range(max_iter + 1):
        U = score(beta)
        I = info(beta)
        cond = np.linalg.cond(I)
        if not np.isfinite(cond) or cond > 1e14:
            raise ConvergenceError(
                "information matrix became singular (likelihood may be monotone)",
                {"iteration": it, "cond": float(cond), "beta": beta.tolist(), "score": U.tolist()},
            )
        step = np.linalg.solve(I, U)
        if np.max(np.abs(U)) <= stol and np.max(np.abs(step)) <= 1e-7 * max(1.0, np.max(np.abs(beta))):
            # one last full step: quadratic convergence leaves an error of order step**2
            return beta + step, it
        if it == max_iter:
            break
        lam = 1.0
        for _ in range(40):
            cand = beta + lam * step
            llc = loglik(cand)
            if np.isfinite(llc) and llc >= ll - 1e-12 * abs(ll):
                break
            lam /= 2
        beta, ll = cand, llc
    raise ConvergenceError(
        f"Newton iteration did not converge in {max_iter} iterations (monotone likelihood?)",
        {"beta": beta.tolist(), "score": score(beta).tolist(), "loglik": float(ll)},
    )


# --------------------------------------------------------------------------
# logistic regression


def ee_logistic(beta, X, y, weight=None):
    r = (y - expit(X @ beta))
    if weight is not None:
        r = r * weight
    return r[:, None] * X


@dataclass(frozen=True)
class LogisticFit:
    coef: np.ndarray
    cov: np.ndarray
    names: tuple[str, ...]
    iterations: int

    def predict(self, X) -> np.ndarray:
        return expit(np.asarray(X) @ self.coef)


def logistic_loglik(beta, X, y):
    eta = X @ beta
    return float(np.sum(y * log_expit(eta) + (1 - y) * log_expit(-eta)))


def fit_logistic(X, y, names=None, tol=1e-9, max_iter=50) -> LogisticFit:
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    check_design(X, "logistic design")
    if np.all(y == y[0]):
        raise DegenerateFitError("logistic outcome is constant")

    def score(b):
        return X.T @ (y - expit(X @ b))

    def info(b):
        p = expit(X @ b)
        return (X * (p * (1 - p))[:, None]).T @ X

    beta, it = newton_maximize(lambda b: logistic_loglik(b, X, y), score, info, np.zeros(X.shape[1]), tol, max_iter, len(y))
    # fitted probabilities pinned at 0/1 mean the MLE is at infinity
    eta = X @ beta
    if np.max(np.abs(eta)) > 30:
        raise ConvergenceError("logistic fit is separated (fitted probabilities at 0 or 1)", {"beta": beta.tolist()})
    return LogisticFit(beta, np.linalg.inv(info(beta)), tuple(names or ()), it)


# --------------------------------------------------------------------------
# log-linear mean model E(y | v) = exp(v'b), fitted with Poisson score equations


def ee_loglinear(beta, V, y, weight=None):
    r = y - np.exp(V @ beta)
    if weight is not None:
        r = r * weight
    return r[:, None] * V


@dataclass(frozen=True)
class LogLinearFit:
    coef: np.ndarray
    names: tuple[str, ...]
    iterations: int
    n_mean_above_one: int

    def mean(self, V) -> np.ndarray:
        return np.exp(np.asarray(V) @ self.coef)

    def log_mean(self, V) -> np.ndarray:
        return np.asarray(V) @ self.coef


def fit_loglinear(V, y, names=None, tol=1e-9, max_iter=50) -> LogLinearFit:
    V = np.asarray(V, dtype=float)
    y = np.asarray(y, dtype=float)
    check_design(V, "log-linear design")
    if np.all(y == 0):
        raise ConvergenceError("outcome is identically zero; intercept diverges to -inf")

    def loglik(b):
        eta = V @ b
        return float(np.sum(y * eta - np.exp(eta)))

    def score(b):
        return V.T @ (y - np.exp(V @ b))

    def info(b):
        return (V * np.exp(V @ b)[:, None]).T @ V

    b0 = np.zeros(V.shape[1])
    if np.allclose(V[:, 0], 1.0):
        b0[0] = np.log(np.mean(y))
    beta, it = newton_maximize(loglik, score, info, b0, tol, max_iter, len(y))
    return LogLinearFit(beta, tuple(names or ()), it, int(np.sum(V @ beta > 0)))
