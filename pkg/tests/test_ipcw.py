import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from proxec.dataset import Schema, StudyDataset
from proxec.errors import ConvergenceError, DataError, WeakProxyError
from proxec.estimating import solve
from proxec.ipcw import (
    build_design,
    build_stack,
    dr_functional,
    estimate_doubly_robust,
    estimate_outcome_bridge,
    estimate_treatment_bridge,
    fit_h,
    fit_q,
    ob_functional,
    tb_functional,
)
from proxec.survival import ExpPHFit

from conftest import binary_dataset, binary_truth, categorical_dataset, sim_dataset

NO_CENSORING = ExpPHFit(np.array([-800.0, 0.0]), np.eye(2), np.eye(2), ("(Intercept)", "Z"), 0, 0)


def _plain(n, seed, z_equals_w=False):
    rng = np.random.default_rng(seed)
    r = (rng.random(n) < 0.5).astype(int)
    u = rng.random(n) < 0.4
    w = (rng.random(n) < np.where(u, 0.7, 0.2)).astype(float)
    z = w.copy() if z_equals_w else (rng.random(n) < np.where(u, 0.8, 0.3)).astype(float)
    t = rng.exponential(np.where(u, 300.0, 900.0))
    return StudyDataset(Schema((), True, True), r, np.where(r == 0, 1, 0), t, np.ones(n, int),
                        np.empty((n, 0)), nce=z, nco=w)


def test_h_group_means_when_instrument_is_regressor():
    ds = _plain(4000, 1, z_equals_w=True)
    fit = fit_h(ds, 365.0, censor=NO_CENSORING)
    ext = ds.study == 1
    y = ds.time <= 365
    means = [y[ext & (ds.nco == w)].mean() for w in (0, 1)]
    assert fit.coef[0] == pytest.approx(means[0], abs=1e-12)
    assert fit.coef[0] + fit.coef[1] == pytest.approx(means[1], abs=1e-12)


def test_h_two_cell_wald_ratio():
    ds = _plain(4000, 2)
    fit = fit_h(ds, 365.0, censor=NO_CENSORING)
    ext = ds.study == 1
    y = (ds.time <= 365).astype(float)
    z, w = ds.nce, ds.nco
    dy = y[ext & (z == 1)].mean() - y[ext & (z == 0)].mean()
    dw = w[ext & (z == 1)].mean() - w[ext & (z == 0)].mean()
    b = dy / dw
    a = y[ext].mean() - b * w[ext].mean()
    np.testing.assert_allclose(fit.coef, [a, b], atol=1e-12)


def test_h_zero_when_no_events_by_t():
    ds = _plain(500, 3)
    fit = fit_h(ds, ds.time.min() / 2, censor=NO_CENSORING)
    np.testing.assert_array_equal(fit.coef, 0.0)


def test_q_constant_odds_without_confounding():
    rng = np.random.default_rng(4)
    n = 100_000
    ds = _plain(n, 4)
    pi = 0.3
    ds = ds.with_columns(study=(rng.random(n) < pi).astype(int), arm=np.zeros(n, int))
    ds = ds.with_columns(arm=np.where(ds.study == 0, 1, 0))
    fit = fit_q(ds)
    assert fit.coef[0] == pytest.approx((1 - pi) / pi, rel=0.05)
    assert abs(fit.coef[1]) < 0.1


def test_propensity_separation():
    ds = _plain(300, 5)
    ds = ds.with_columns(study=ds.nco.astype(int), arm=np.where(ds.nco == 0, 1, 0))
    with pytest.raises(ConvergenceError):
        fit_q(ds)


def test_q_reweights_to_primary_share():
    ds = sim_dataset(200_000, 6)
    q = fit_q(ds).fitted
    R = ds.study
    assert np.mean(R * q) == pytest.approx(np.mean(1 - R), abs=0.01)


def test_functionals_constant_and_zero():
    R = np.array([0, 0, 1, 1, 1.0])
    assert ob_functional(R, np.full(5, 0.07)) == pytest.approx(0.07)
    assert tb_functional(R, np.ones(5), np.zeros(5)) == 0.0


def test_zero_external_events_gives_zero():
    ds = sim_dataset(3000, 7)
    t = ds.time[(ds.study == 1) & (ds.event == 1)].min() / 2
    assert build_stack(ds, "treatment-bridge", t).point == 0.0
    assert not estimate_treatment_bridge(ds, t).valid


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31))
def test_dr_collapses(seed):
    rng = np.random.default_rng(seed)
    n = 50
    R = (rng.random(n) < 0.5).astype(float)
    R[:2] = [0, 1]
    q, h, yw = rng.normal(size=(3, n))
    assert dr_functional(R, np.zeros(n), h, yw) == ob_functional(R, h)
    assert dr_functional(R, q, np.zeros(n), yw) == tb_functional(R, q, yw)


def test_saturated_bridges_agree():
    ds = categorical_dataset(5000, 8)
    ob = build_stack(ds, "outcome-bridge", 365, interactions=True).point
    tb = build_stack(ds, "treatment-bridge", 365, interactions=True).point
    tb_all = build_stack(ds, "treatment-bridge", 365, q_moment="alldata", interactions=True).point
    dr = build_stack(ds, "doubly-robust", 365, interactions=True).point
    assert tb == pytest.approx(ob, abs=1e-10)
    assert tb_all == pytest.approx(ob, abs=1e-10)
    assert dr == pytest.approx(ob, abs=1e-10)


def test_joint_solve_keeps_closed_form_point(sim6500):
    for method in ("outcome-bridge", "treatment-bridge", "doubly-robust"):
        stack = build_stack(sim6500, method, 365)
        sol = solve(stack.system, stack.init)
        assert sol.theta[stack.target] == pytest.approx(stack.point, abs=1e-9)
        assert sol.iterations <= 2


def test_discrete_law_consistency():
    ds = binary_dataset(200_000, 9)
    truth = binary_truth()
    for est in (estimate_outcome_bridge, estimate_treatment_bridge, estimate_doubly_robust):
        e = est(ds, 365, interactions=True)
        assert abs(e.estimate - truth) < 0.005
        assert e.covers(truth)


def test_independent_proxies_flagged():
    rng = np.random.default_rng(1010)
    ds = binary_dataset(5000, 10)
    ds = ds.with_columns(nce=(rng.random(len(ds)) < 0.5).astype(float))
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        try:
            fit_h(ds, 365)
        except WeakProxyError:
            return
    assert any("weakly related" in str(w.message) for w in caught)


def test_missing_z_on_external_is_data_error(sim6500):
    z = sim6500.nce.copy()
    z[np.flatnonzero(sim6500.study == 1)[0]] = np.nan
    with pytest.raises(DataError):
        build_design(sim6500.with_columns(nce=z))
    # missing Z among primary records is allowed
    z = sim6500.nce.copy()
    z[np.flatnonzero(sim6500.study == 0)[:5]] = np.nan
    build_design(sim6500.with_columns(nce=z))


def test_cox_censoring_is_point_only(sim6500):
    e = estimate_outcome_bridge(sim6500, 365, censor="cox")
    assert e.se is None and e.diagnostics["inference"] == "bootstrap-only"
