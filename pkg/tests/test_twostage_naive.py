import math
import warnings

import numpy as np
import pytest

from proxec.dgp import DGPConfig, _p_r, _p_w, _p_z, expect, generate, true_incidence
from proxec.errors import ConvergenceError, DataError, DegenerateFitError
from proxec.estimating import solve
from proxec.naive import estimate_naive, estimate_oracle
from proxec.survival import fit_exponential, km_incidence
from proxec.twostage import build_stack, estimate_twostage, fit_stage1, fit_stage2, twostage_point

from conftest import sim_dataset


def test_stage1_all_zero_w(sim6500):
    with pytest.raises(ConvergenceError):
        fit_stage1(sim6500.with_columns(nco=np.zeros(len(sim6500))))


def test_stage1_against_mixture_means():
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        cfg = DGPConfig.for_cell("medium,medium", 400_000)
        ds = generate(cfg, 12)
    s1 = fit_stage1(ds)
    for r in (0, 1):
        for z in (0, 1):
            for x1 in (0, 1):
                for x2 in (0, 1):
                    def joint(u, ub, a, b, f=None):
                        if (a, b) != (x1, x2):
                            return 0 * u
                        pr = _p_r(cfg, ub, a, b)
                        pz = _p_z(cfg, ub, a, b)
                        return (pr if r else 1 - pr) * (pz if z else 1 - pz) * (1 if f is None else f(u, a, b))

                    truth = expect(cfg, lambda u, ub, a, b: joint(u, ub, a, b, lambda u_, a_, b_: _p_w(cfg, u_, a_, b_)))
                    truth /= expect(cfg, joint)
                    v = np.array([1, r, z, x1, x2], float)
                    # the log-linear model is a working approximation of the mixture
                    assert math.exp(v @ s1.coef) == pytest.approx(truth, abs=0.02)


def test_fixed_zero_gamma_is_naive_fit(sim6500):
    s1 = fit_stage1(sim6500)
    s2 = fit_stage2(sim6500, s1, t0=365.0, gamma_w=0.0)
    ext = sim6500.study == 1
    t = np.minimum(sim6500.time[ext], 365.0)
    d = sim6500.event[ext] * (sim6500.time[ext] <= 365.0)
    naive = fit_exponential(t, d, np.column_stack([np.ones(ext.sum()), sim6500.covariates[ext]]))
    np.testing.assert_allclose(s2.coef, naive.coef, rtol=1e-10)


def test_zero_events_in_window(sim6500):
    s1 = fit_stage1(sim6500)
    first = sim6500.time[(sim6500.study == 1) & (sim6500.event == 1)].min()
    with pytest.raises(DegenerateFitError):
        fit_stage2(sim6500, s1, t0=first / 2)


def test_single_cell_closed_form(sim6500):
    from dataclasses import replace

    ds = replace(sim6500, schema=replace(sim6500.schema, covariates=()), covariates=np.empty((len(sim6500), 0)))
    s1 = fit_stage1(ds)
    s2 = fit_stage2(ds, s1, t0=None, gamma_w=0.0)
    p = twostage_point(ds, s1, s2, 365.0)
    assert p == pytest.approx(1 - math.exp(-math.exp(s2.coef[0]) * 365.0), rel=1e-12)


def test_horizon_beyond_window(sim6500):
    with pytest.raises(DataError):
        build_stack(sim6500, 400.0, t0=365.0)


def test_stacked_point_and_se(sim6500):
    stack = build_stack(sim6500, 365.0)
    sol = solve(stack.system, stack.init)
    assert sol.theta[stack.target] == pytest.approx(stack.point, abs=1e-9)
    est = estimate_twostage(sim6500, 365.0)
    assert est.valid and 0 < est.se_cloglog < 1


def test_cox_stage_two_point_only(sim6500):
    est = estimate_twostage(sim6500, 365.0, model="cox")
    assert est.se is None and 0 < est.estimate < 1


# --------------------------------------------------------------------------
# naive and oracle


def test_naive_matches_km_when_exchangeable():
    rng = np.random.default_rng(13)
    ds = sim_dataset(100_000, 13)
    r = (rng.random(len(ds)) < 0.5).astype(int)
    x = (rng.random((len(ds), 2)) < 0.5).astype(float)
    t = rng.exponential(1 / 1e-4, len(ds))
    c = rng.exponential(2000.0, len(ds))
    ds = ds.with_columns(study=r, arm=np.where(r == 0, 1, 0), covariates=x, time=np.minimum(t, c),
                         event=(t <= c).astype(int))
    ext = r == 1
    km = km_incidence(ds.time[ext], ds.event[ext], 365)
    assert estimate_naive(ds, 365).estimate == pytest.approx(km.estimate, abs=0.002)


def test_oracle_with_constant_u_is_naive(sim6500):
    lat = dict(sim6500.latent)
    lat["U"] = np.full(len(sim6500), 0.4)
    oracle = estimate_oracle(sim6500.with_columns(latent=lat), 365)
    assert oracle.estimate == pytest.approx(estimate_naive(sim6500, 365).estimate, abs=1e-12)
    assert oracle.diagnostics["dropped_constant"] == ["U"]


def test_oracle_large_n_bias():
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        cfg = DGPConfig.for_cell("medium,medium", 500_000)
        ds = generate(cfg, 14)
    assert abs(estimate_oracle(ds, 365).estimate - true_incidence(cfg)) < 0.002
