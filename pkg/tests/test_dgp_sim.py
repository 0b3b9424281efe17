import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate

from proxec.dgp import (
    DGPConfig,
    calibration_constant,
    generate,
    marginals,
    observe,
    true_incidence,
    truncated_normal,
    truncated_normal_pdf,
)
from proxec.simulation import (
    SimScenario,
    merge_records,
    replicate_seed,
    report_from_records,
    run_records,
    run_scenarios,
)

pytestmark = pytest.mark.filterwarnings("ignore:DGP calibration")


# --------------------------------------------------------------------------
# truncated normal


def test_truncated_normal_narrow_interval():
    rng = np.random.default_rng(0)
    x = truncated_normal(0.5, 1.0, 0.3, 0.3 + 1e-12, rng, 100)
    np.testing.assert_allclose(x, 0.3, atol=1e-11)
    with pytest.raises(ValueError):
        truncated_normal(0.5, 1.0, 0.3, 0.3, rng, 10)


def test_truncated_normal_mean_matches_quadrature():
    rng = np.random.default_rng(1)
    x = truncated_normal(0.5, 1.0, 0.0, 1.0, rng, 1_000_000)
    mean, _ = integrate.quad(lambda u: u * truncated_normal_pdf(u, 0.5, 1.0, 0.0, 1.0), 0, 1)
    assert x.mean() == pytest.approx(mean, abs=1e-3)
    assert x.min() >= 0 and x.max() <= 1


@settings(max_examples=25, deadline=None)
@given(st.floats(-2, 2), st.floats(0.2, 3), st.floats(0.1, 2))
def test_truncated_normal_pdf_integrates_to_one(mean, sd, width):
    total, _ = integrate.quad(lambda u: truncated_normal_pdf(u, mean, sd, mean - width, mean + 2 * width),
                              mean - width, mean + 2 * width)
    assert total == pytest.approx(1.0, rel=1e-8)


def test_truncated_normal_symmetric_about_centre():
    rng = np.random.default_rng(2)
    x = truncated_normal(0.5, 1.0, 0.0, 1.0, rng, 400_000)
    assert np.mean(x) == pytest.approx(0.5, abs=2e-3)


# --------------------------------------------------------------------------
# generator


def test_same_seed_same_dataset():
    cfg = DGPConfig.for_cell("medium,medium", 2000)
    a, b = generate(cfg, 5), generate(cfg, 5)
    for col in ("study", "time", "event", "nce", "nco", "covariates"):
        assert getattr(a, col).tobytes() == getattr(b, col).tobytes()
    assert generate(cfg, 6).time.tobytes() != a.time.tobytes()


def test_calibrated_truth_is_anchor():
    cfg = DGPConfig.for_cell("medium,medium")
    assert true_incidence(cfg) == pytest.approx(0.035, abs=1e-10)
    assert calibration_constant(cfg) == pytest.approx(0.693901, abs=1e-5)


def test_generated_marginals_match_quadrature():
    cfg = DGPConfig.for_cell("medium,medium", 1_000_000)
    ds = generate(cfg, 7)
    m = marginals(cfg)
    se = lambda p: math.sqrt(p * (1 - p) / cfg.n)
    assert ds.study.mean() == pytest.approx(m["P(R=1)"], abs=4 * se(m["P(R=1)"]))
    assert ds.nco.mean() == pytest.approx(m["P(W=1)"], abs=4 * se(m["P(W=1)"]))
    assert ds.nce.mean() == pytest.approx(m["P(Z=1)"], abs=4 * se(m["P(Z=1)"]))
    t0 = ds.latent["T0"][ds.study == 0]
    assert np.mean(t0 <= 365) == pytest.approx(0.035, abs=4 * se(0.035) * math.sqrt(2))


def test_observe_placebo_law():
    ds = generate(DGPConfig.for_cell("medium,medium", 3000), 8)
    null = observe(ds, "placebo")
    ext = ds.study == 1
    np.testing.assert_array_equal(null.time[ext], ds.time[ext])
    assert not np.array_equal(null.time[~ext], ds.time[~ext])
    with pytest.raises(ValueError):
        observe(ds, "other")


# --------------------------------------------------------------------------
# simulation harness

FAST = ("naive-x", "ts1y", "ob")


def test_replicate_seed_depends_on_scenario_and_rep():
    s1, s2 = SimScenario("medium,medium"), SimScenario("high,high")
    a = replicate_seed(0, s1, 0).generate_state(2)
    assert a.tobytes() == replicate_seed(0, s1, 0).generate_state(2).tobytes()
    assert a.tobytes() != replicate_seed(0, s2, 0).generate_state(2).tobytes()
    assert a.tobytes() != replicate_seed(0, s1, 1).generate_state(2).tobytes()


def test_single_replicate_has_no_sd():
    rep = run_scenarios([SimScenario("medium,medium", methods=FAST)], 1, seed=1)
    for row in rep.rows:
        assert row.sd is None and row.replicates == 1


def test_invalid_inputs():
    with pytest.raises(ValueError):
        run_records([SimScenario("medium,medium", methods=FAST)], 0)
    with pytest.raises(ValueError):
        SimScenario("tiny,medium")
    with pytest.raises(ValueError):
        SimScenario("medium,medium", methods=("magic",))


def test_split_sweeps_merge_to_one_sweep():
    sc = [SimScenario("medium,medium", n=3000, methods=FAST)]
    whole = run_records(sc, 6, seed=3)
    parts = merge_records(run_records(sc, range(3, 6), seed=3), run_records(sc, range(0, 3), seed=3))
    assert report_from_records(sc, parts, 3).to_csv() == report_from_records(sc, whole, 3).to_csv()


def test_report_is_worker_invariant():
    sc = [SimScenario("medium,medium", n=3000, methods=FAST)]
    a = run_scenarios(sc, 4, seed=4, workers=1).to_csv()
    b = run_scenarios(sc, 4, seed=4, workers=2).to_csv()
    assert a == b


def test_report_columns_and_metadata(tmp_path):
    sc = [SimScenario("medium,medium", n=3000, methods=FAST)]
    rep = run_scenarios(sc, 2, seed=5, config={"k": 1})
    header = rep.to_csv().splitlines()[0].split(",")
    assert header[:11] == ["Factor 2", "Method", "Specification", "Estimate", "Est. Incidence", "SD", "Med. SE",
                           "Coverage", "Power", "Type I Error", "Prop_ex"]
    assert rep.metadata["config"] == {"k": 1}
    assert rep.metadata["truth"][sc[0].id] == pytest.approx(0.035)
    csv_path, json_path = rep.write(tmp_path / "r")
    assert open(csv_path).read() == rep.to_csv()
    assert rep.row("medium,medium", "ob").specification == "Outcome bridge"
