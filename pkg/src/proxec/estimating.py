"""Stacked estimating equations: root finding, sandwich variance, delta method
and a study-stratified nonparametric bootstrap.

A :class:`MomentSystem` wraps a vectorised estimating function returning an
``(n, p)`` array, one row per record. Blocks that only apply to some records
multiply by an indicator, so every block is averaged over the same ``n``.
"""

from __future__ import annotations

import concurrent.futures as cf
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import BootstrapUnstableError, ConvergenceError, EstimationError, SingularDesignError

MAX_COND = 1e13


@dataclass(frozen=True)
class MomentSystem:
    psi: Callable[[np.ndarray], np.ndarray]
    p: int
    blocks: tuple[tuple[str, int], ...] = ()
    jacobian: Callable[[np.ndarray], np.ndarray] | None = None  # mean-psi Jacobian, optional

    def __post_init__(self):
        if not self.blocks:
            object.__setattr__(self, "blocks", (("theta", self.p),))
        if sum(k for _, k in self.blocks) != self.p:
            raise ValueError("block sizes must add up to p")

    def block_slice(self, label: str) -> slice:
        start = 0
        for name, k in self.blocks:
            if name == label:
                return slice(start, start + k)
            start += k
        raise KeyError(label)

    def mean(self, theta) -> np.ndarray:
        return self.psi(np.asarray(theta, dtype=float)).mean(axis=0)

    @staticmethod
    def concat(*systems: MomentSystem, prefixes: Sequence[str] | None = None) -> MomentSystem:
        """Stack systems whose parameters are disjoint but whose records are shared."""
        sizes = [s.p for s in systems]
        cuts = np.cumsum([0, *sizes])
        prefixes = prefixes or [""] * len(systems)

        def psi(theta):
            return np.hstack([s.psi(theta[a:b]) for s, a, b in zip(systems, cuts[:-1], cuts[1:])])

        def jacobian(theta):
            # disjoint parameters: the mean Jacobian is block diagonal
            J = np.zeros((cuts[-1], cuts[-1]))
            for s, a, b in zip(systems, cuts[:-1], cuts[1:]):
                J[a:b, a:b] = _jac(s, theta[a:b])
            return J

        blocks = tuple((f"{pre}{name}", k) for s, pre in zip(systems, prefixes) for name, k in s.blocks)
        return MomentSystem(psi=psi, p=int(cuts[-1]), blocks=blocks, jacobian=jacobian)


@dataclass(frozen=True)
class SolvedSystem:
    theta: np.ndarray
    A: np.ndarray
    B: np.ndarray
    n: int
    iterations: int
    moment_norm: float
    system: MomentSystem = field(repr=False)

    @property
    def cov(self) -> np.ndarray:
        """Sandwich covariance A^-1 B A^-T / n."""
        ainv = np.linalg.inv(self.A)
        v = ainv @ self.B @ ainv.T / self.n
        return (v + v.T) / 2

    @property
    def se(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.cov), 0.0, None))

    def block(self, label: str) -> np.ndarray:
        return self.theta[self.system.block_slice(label)]

    def diagnostics(self) -> dict:
        return {
            "iterations": self.iterations,
            "moment_norm": self.moment_norm,
            "cond_A": float(np.linalg.cond(self.A)),
            "p": int(self.theta.size),
            "n": self.n,
        }


def join_solutions(*solved: SolvedSystem, prefixes: Sequence[str] | None = None) -> SolvedSystem:
    """Joint solution of separately solved systems with disjoint parameters over
    the same records: A is block diagonal, B keeps the cross products."""
    system = MomentSystem.concat(*(s.system for s in solved), prefixes=prefixes)
    theta = np.concatenate([s.theta for s in solved])
    A = np.zeros((theta.size, theta.size))
    start = 0
    for s in solved:
        A[start:start + s.theta.size, start:start + s.theta.size] = s.A
        start += s.theta.size
    psi = system.psi(theta)
    return SolvedSystem(theta, A, psi.T @ psi / psi.shape[0], psi.shape[0], max(s.iterations for s in solved),
                        max(s.moment_norm for s in solved), system)


def numeric_jacobian(f: Callable[[np.ndarray], np.ndarray], theta: np.ndarray, rel_step: float = 1e-6) -> np.ndarray:
    """Central-difference Jacobian of a vector function, step rel_step*max(1,|theta_j|)."""
    theta = np.asarray(theta, dtype=float)
    f0 = np.asarray(f(theta))
    J = np.empty((f0.size, theta.size))
    for j in range(theta.size):
        h = rel_step * max(1.0, abs(theta[j]))
        up = theta.copy()
        dn = theta.copy()
        up[j] += h
        dn[j] -= h
        J[:, j] = (np.asarray(f(up)) - np.asarray(f(dn))) / (2 * h)
    return J


def _jac(system: MomentSystem, theta):
    if system.jacobian is not None:
        return system.jacobian(theta)
    return numeric_jacobian(system.mean, theta)


def solve(system: MomentSystem, init, tol: float = 1e-8, max_iter: int = 100) -> SolvedSystem:
    """Newton iteration for mean psi(theta) = 0 with backtracking.

    Converged means ``max|mean psi| <= tol`` and a vanishing Newton step;
    the second condition rejects runs that drift toward infinity (separation)
    while the moments decay.
    """
    theta = np.array(init, dtype=float)
    if theta.size != system.p:
        raise ValueError(f"init has length {theta.size}, system expects {system.p}")
    g = system.mean(theta)
    if not np.all(np.isfinite(g)):
        raise EstimationError("moment function is not finite at the initial point")
    best = (np.max(np.abs(g)), theta.copy())
    for it in range(max_iter + 1):
        J = _jac(system, theta)
        cond = np.linalg.cond(J)
        if not np.isfinite(cond) or cond > MAX_COND:
            if np.max(np.abs(g)) <= tol and it > 0:
                raise ConvergenceError(
                    "moments vanish only at a degenerate point (parameters diverging)",
                    {"cond": float(cond), "theta": theta.tolist()},
                )
            raise SingularDesignError(
                f"singular Jacobian (condition number {cond:.3g})", {"cond": float(cond), "theta": theta.tolist()}
            )
        step = np.linalg.solve(J, g)
        norm = np.max(np.abs(g))
        if norm <= tol and np.max(np.abs(step)) <= np.sqrt(tol) * max(1.0, np.max(np.abs(theta))):
            # polish with the final step so linear systems land on the root
            cand = theta - step
            gc = system.mean(cand)
            if np.all(np.isfinite(gc)) and np.max(np.abs(gc)) <= norm:
                theta, norm = cand, np.max(np.abs(gc))
            psi = system.psi(theta)
            return SolvedSystem(
                theta=theta,
                A=J,
                B=psi.T @ psi / psi.shape[0],
                n=psi.shape[0],
                iterations=it,
                moment_norm=float(norm),
                system=system,
            )
        if it == max_iter:
            break
        lam = 1.0
        while True:
            cand = theta - lam * step
            gc = system.mean(cand)
            if np.all(np.isfinite(gc)) and np.max(np.abs(gc)) < norm * (1 - 1e-4 * lam) or lam < 1e-8:
                break
            lam /= 2
        if not np.all(np.isfinite(gc)):
            break
        theta, g = cand, gc
        if np.max(np.abs(g)) < best[0]:
            best = (np.max(np.abs(g)), theta.copy())
    raise ConvergenceError(
        f"no convergence after {max_iter} iterations",
        {"best_norm": float(best[0]), "best_theta": best[1].tolist()},
    )


def delta(solved: SolvedSystem, g: Callable[[np.ndarray], float], grad: Callable[[np.ndarray], np.ndarray] | None = None):
    """Value and delta-method standard error of a smooth scalar map of theta."""
    value = float(g(solved.theta))
    if not np.isfinite(value):
        raise EstimationError("transformed value is not finite")
    if grad is None:
        d = numeric_jacobian(lambda th: np.atleast_1d(g(th)), solved.theta).ravel()
    else:
        d = np.asarray(grad(solved.theta), dtype=float)
    var = float(d @ solved.cov @ d)
    return value, float(np.sqrt(max(var, 0.0)))


@dataclass(frozen=True)
class Stack:
    """A moment system with its warm start; ``target`` indexes the parameter
    of interest and ``diagnostics`` carries what the nuisance fits reported."""

    system: MomentSystem
    init: np.ndarray
    target: int
    diagnostics: dict
    n0: int
    n1: int
    specification: str = ""
    sandwich: bool = True  # False when some nuisance fit is plugged in unstacked

    @property
    def point(self) -> float:
        return float(self.init[self.target])


# --------------------------------------------------------------------------
# bootstrap


@dataclass(frozen=True)
class BootstrapResult:
    se: float
    ci: tuple[float, float]
    estimates: np.ndarray
    failed: int
    reps: int


def _boot_one(args):
    estimator, ds, strata, seed_seq = args
    rng = np.random.default_rng(seed_seq)
    idx = np.concatenate([rng.choice(s, size=s.size, replace=True) for s in strata])
    try:
        return float(estimator(ds.take(idx)))
    except EstimationError:
        return float("nan")


def stratified_indices(ds) -> list[np.ndarray]:
    return [np.flatnonzero(ds.study == r) for r in (0, 1) if np.any(ds.study == r)]


def bootstrap(estimator, ds, reps: int = 1000, seed: int = 0, workers: int = 1, level: float = 0.95) -> BootstrapResult:
    """Nonparametric bootstrap resampling records within study strata.

    Replicate ``b`` draws from ``SeedSequence(seed).spawn``'s ``b``-th child,
    so results do not depend on ``workers``. Failed replicates (estimation
    errors or non-finite values) are dropped and counted.
    """
    if reps < 2:
        raise ValueError("reps must be at least 2")
    strata = stratified_indices(ds)
    children = np.random.SeedSequence(seed).spawn(reps)
    jobs = [(estimator, ds, strata, c) for c in children]
    if workers > 1:
        with cf.ProcessPoolExecutor(max_workers=workers) as ex:
            est = np.array(list(ex.map(_boot_one, jobs, chunksize=max(1, reps // (4 * workers)))))
    else:
        est = np.array([_boot_one(j) for j in jobs])
    ok = np.isfinite(est)
    failed = int(np.sum(~ok))
    if failed > reps / 2:
        raise BootstrapUnstableError(f"{failed} of {reps} bootstrap replicates failed", {"failed": failed})
    good = est[ok]
    alpha = (1 - level) / 2
    lo, hi = np.quantile(good, [alpha, 1 - alpha])
    return BootstrapResult(float(np.std(good, ddof=1)), (float(lo), float(hi)), est, failed, reps)
