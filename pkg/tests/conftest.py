"""Shared fixtures: small discrete data-generating laws with exact answers."""

from __future__ import annotations

import warnings

import numpy as np
import pytest
from scipy.special import expit

from proxec.dataset import Categorical, Schema, StudyDataset
from proxec.dgp import DGPConfig, generate

HORIZON = 365.0
BASE_RATE = 2.5e-4


def _binary_law():
    """Cell probabilities of a binary-U law; returns arrays over (x, u)."""
    x = np.array([0, 0, 1, 1], float)
    u = np.array([0, 1, 0, 1], float)
    px = np.where(x == 1, 0.5, 0.5)
    pu = np.where(u == 1, 0.3 + 0.3 * x, 0.7 - 0.3 * x)
    pr = expit(-0.2 + 0.8 * u + 0.3 * x)  # P(R=1 | U, X)
    rate = BASE_RATE * np.exp(0.8 * u + 0.4 * x)
    return x, u, px * pu, pr, rate


def binary_truth(t: float = HORIZON) -> float:
    """Exact P(T*(0) <= t | R=0) by enumeration over (U, X)."""
    _, _, w, pr, rate = _binary_law()
    w0 = w * (1 - pr)
    return float(np.sum(w0 * -np.expm1(-rate * t)) / np.sum(w0))


def binary_dataset(n: int, seed: int, null: bool = False) -> StudyDataset:
    """Binary U, X, Z, W; Z and W independent given (U, X); exponential event
    and censoring times, censoring depending on (Z, X) only. Primary-trial
    records follow an active law with hazard ratio 0.3 unless ``null``."""
    rng = np.random.default_rng(seed)
    x = (rng.random(n) < 0.5).astype(float)
    u = (rng.random(n) < 0.3 + 0.3 * x).astype(float)
    r = (rng.random(n) < expit(-0.2 + 0.8 * u + 0.3 * x)).astype(int)
    z = (rng.random(n) < expit(-0.5 + 1.5 * u + 0.4 * x)).astype(float)
    w = (rng.random(n) < expit(-1.0 + 1.5 * u + 0.3 * x)).astype(float)
    rate = BASE_RATE * np.exp(0.8 * u + 0.4 * x)
    if not null:
        rate = np.where(r == 0, 0.3 * rate, rate)
    tt = rng.exponential(size=n) / rate
    c = rng.exponential(size=n) / (1.5e-3 * np.exp(0.3 * z - 0.2 * x))
    return StudyDataset(
        schema=Schema(covariates=("X",), has_nce=True, has_nco=True, latent=("U",)),
        study=r, arm=np.where(r == 0, 1, 0), time=np.minimum(tt, c), event=(tt <= c).astype(int),
        covariates=x[:, None], nce=z, nco=w, latent={"U": u},
    )


def categorical_dataset(n: int, seed: int, levels: int = 3) -> StudyDataset:
    """Binary W, Z and one categorical X coded as indicators, for saturated bridges."""
    rng = np.random.default_rng(seed)
    xc = rng.integers(0, levels, n)
    u = (rng.random(n) < 0.3 + 0.1 * xc).astype(float)
    r = (rng.random(n) < expit(-0.1 + 0.7 * u - 0.2 * xc)).astype(int)
    z = (rng.random(n) < expit(-0.3 + 1.2 * u + 0.2 * xc)).astype(float)
    w = (rng.random(n) < expit(-0.8 + 1.4 * u)).astype(float)
    tt = rng.exponential(size=n) / (5e-4 * np.exp(0.6 * u + 0.1 * xc))
    c = rng.exponential(size=n) / 1e-3
    names = tuple(f"X{k}" for k in range(1, levels))
    X = np.column_stack([(xc == k).astype(float) for k in range(1, levels)])
    return StudyDataset(
        schema=Schema(covariates=names, has_nce=True, has_nco=True,
                      categoricals=(Categorical("X", tuple(str(k) for k in range(levels))),)),
        study=r, arm=np.where(r == 0, 1, 0), time=np.minimum(tt, c), event=(tt <= c).astype(int),
        covariates=X, nce=z, nco=w,
    )


def sim_dataset(n: int = 6500, seed: int = 1, cell: str = "medium,medium") -> StudyDataset:
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return generate(DGPConfig.for_cell(cell, n), seed)


@pytest.fixture(scope="session")
def sim6500() -> StudyDataset:
    return sim_dataset()


@pytest.fixture(scope="session")
def binary20k() -> StudyDataset:
    return binary_dataset(20_000, 3)
