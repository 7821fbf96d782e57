import json
import math
import warnings

import numpy as np
import pytest
from hypothesis import given, strategies as st

from hetperf.errors import InsufficientData, InvalidArgument
from hetperf.evidential import NigParams, prediction_interval
from hetperf.metrics import (
    CalibrationScores,
    MetricReport,
    RankingScores,
    RegressionScores,
    bootstrap_pareto_auc,
    calibration_metrics,
    expected_calibration_error,
    pareto_auc,
    pareto_front,
    ranking_metrics,
    regression_metrics,
)

from nig_oracles import sample_nig_targets

vec = st.lists(st.floats(-100, 100, allow_nan=False, allow_subnormal=False), min_size=3, max_size=30)


# ---------------------------------------------------------------- regression


def test_perfect_fit():
    r = regression_metrics([1, 2, 3], [1, 2, 3])
    assert (r.rmse, r.mae, r.mape, r.r2) == (0.0, 0.0, 0.0, 1.0)


def test_constant_mean_prediction_has_zero_r2():
    assert regression_metrics([1, 2, 6], [3, 3, 3]).r2 == 0.0


def test_hand_example():
    r = regression_metrics([1, 2, 3], [1, 2, 4])
    assert r.rmse == pytest.approx(math.sqrt(1 / 3))
    assert r.mae == pytest.approx(1 / 3)
    assert r.r2 == pytest.approx(0.5)


def test_mape_skips_zero_targets():
    assert regression_metrics([0, 2], [5, 3]).mape == pytest.approx(0.5)


def test_regression_too_short():
    with pytest.raises(InsufficientData):
        regression_metrics([1], [1])


@given(vec, st.randoms(use_true_random=False))
def test_regression_bounds_and_permutation(y, rnd):
    y = np.array(y)
    yhat = y + np.linspace(-1, 1, y.size)
    r = regression_metrics(y, yhat)
    assert r.r2 <= 1.0
    perm = list(range(y.size))
    rnd.shuffle(perm)
    r2 = regression_metrics(y[perm], yhat[perm])
    assert r2.rmse == pytest.approx(r.rmse) and r2.mae == pytest.approx(r.mae)


# ---------------------------------------------------------------- ranking


def test_identical_and_reversed_orderings():
    y = [1.0, 2.0, 3.0, 4.0, 5.0]
    r = ranking_metrics(y, y)
    assert (r.spearman, r.kendall) == pytest.approx((1.0, 1.0))
    assert r.ndcg == pytest.approx(1.0)
    r = ranking_metrics(y, y[::-1])
    assert (r.spearman, r.kendall) == pytest.approx((-1.0, -1.0))


def test_kendall_one_adjacent_swap():
    # one discordant pair out of six
    assert ranking_metrics([1, 2, 3, 4], [1, 3, 2, 4]).kendall == pytest.approx(2 / 3)


def test_constant_target_marked_undefined():
    r = ranking_metrics([2, 2, 2], [1, 2, 3])
    assert r.undefined and math.isnan(r.spearman) and math.isnan(r.kendall)


def test_ndcg_prefers_low_targets_first():
    y = [1.0, 5.0, 9.0]
    good = ranking_metrics(y, [0, 1, 2]).ndcg
    bad = ranking_metrics(y, [2, 1, 0]).ndcg
    assert good == pytest.approx(1.0) and bad < good


def test_ranking_k_validated():
    with pytest.raises(InvalidArgument):
        ranking_metrics([1, 2], [1, 2], k=0)


@given(st.lists(st.integers(0, 20), min_size=3, max_size=25, unique=True), st.randoms(use_true_random=False))
def test_ranking_bounds_and_permutation(y, rnd):
    y = np.array(y, dtype=float)
    yhat = np.array([rnd.randint(0, 5) for _ in y], dtype=float)
    r = ranking_metrics(y, yhat)
    perm = list(range(y.size))
    rnd.shuffle(perm)
    r2 = ranking_metrics(y[perm], yhat[perm])
    if not r.undefined:
        assert -1 <= r.spearman <= 1 and -1 <= r.kendall <= 1
        assert r2.spearman == pytest.approx(r.spearman) and r2.kendall == pytest.approx(r.kendall)
    assert r2.ndcg == pytest.approx(r.ndcg)
    assert 0 <= r.ndcg <= 1 + 1e-12


# ---------------------------------------------------------------- calibration


def test_pice_one_bin_nine_hits():
    y = np.zeros(10)
    lo = np.full(10, -1.0)
    hi = np.ones(10)
    hi[0] = -0.5  # one miss
    c = calibration_metrics(y, lo, hi, np.arange(10.0), 0.95, bins=1)
    assert c.pice == pytest.approx(0.05)
    assert c.mce == pytest.approx(0.05)
    assert c.picp == pytest.approx(0.9)


def test_exact_level_gives_zero_error():
    # 20 samples in 2 bins, each with 1 miss out of 10 at level 0.9
    y = np.zeros(20)
    lo, hi = np.full(20, -1.0), np.ones(20)
    hi[[0, 10]] = -0.5
    c = calibration_metrics(y, lo, hi, np.arange(20.0), 0.9, bins=2)
    assert c.pice == pytest.approx(0.0, abs=1e-12) and c.mce == pytest.approx(0.0, abs=1e-12)


def test_all_miss():
    y = np.full(10, 5.0)
    lo, hi = np.zeros(10), np.ones(10)
    c = calibration_metrics(y, lo, hi, np.ones(10), 0.9, bins=2)
    assert c.picp == 0.0
    assert c.mis >= c.sharpness


def test_mis_hand_value():
    # width 2, miss by 1 above at delta 0.1 -> 2 + 20
    c = calibration_metrics([2.0], [-1.0], [1.0], [1.0], 0.9, bins=1)
    assert c.mis == pytest.approx(22.0)
    assert c.sharpness == pytest.approx(2.0)


def test_few_samples_reduce_bins():
    with pytest.warns(RuntimeWarning):
        c = calibration_metrics(np.zeros(7), -np.ones(7), np.ones(7), np.arange(7.0), 0.95, bins=10)
    assert len(c.bins) == 1


def test_calibration_argument_checks():
    with pytest.raises(InsufficientData):
        calibration_metrics([], [], [], [], 0.9)
    with pytest.raises(InvalidArgument):
        calibration_metrics([0], [0], [1], [1], 1.2)


@given(st.integers(5, 60), st.integers(1, 10), st.randoms(use_true_random=False))
def test_calibration_permutation_invariant(n, bins, rnd):
    rng = np.random.default_rng(rnd.randint(0, 10**6))
    y = rng.normal(size=n)
    lo = rng.normal(-1, 0.5, n)
    hi = lo + rng.uniform(0.5, 3, n)
    unc = rng.integers(0, 4, n).astype(float)  # ties on purpose
    perm = rng.permutation(n)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        a = calibration_metrics(y, lo, hi, unc, 0.9, bins)
        b = calibration_metrics(y[perm], lo[perm], hi[perm], unc[perm], 0.9, bins)
    assert a.pice == pytest.approx(b.pice) and a.mce == pytest.approx(b.mce)
    assert a.pice >= 0 and a.mce >= a.pice - 1e-12 and 0 <= a.picp <= 1


def test_picp_on_model_samples_converges():
    rng = np.random.default_rng(11)
    n = 100_000
    g = rng.uniform(-2, 2, n)
    nu, a, b = rng.uniform(0.5, 3, n), rng.uniform(2, 6, n), rng.uniform(0.5, 2, n)
    y = sample_nig_targets(rng, g, nu, a, b, n)
    for level in (0.9, 0.95):
        lo, hi = prediction_interval(NigParams(g, nu, a, b), level)
        c = calibration_metrics(y, lo, hi, b / (a - 1), level)
        assert abs(c.picp - level) <= 0.01


def test_ece_is_95_pice():
    rng = np.random.default_rng(2)
    y, lo = rng.normal(size=40), rng.normal(-1, 0.3, 40)
    hi, unc = lo + 2, rng.random(40)
    assert expected_calibration_error(y, lo, hi, unc) == calibration_metrics(y, lo, hi, unc, 0.95, 10).pice


# ---------------------------------------------------------------- Pareto


def test_front_examples():
    assert pareto_front([(3, 4)]).tolist() == [[3, 4]]
    assert pareto_front([(1, 2), (2, 1), (2, 2)]).tolist() == [[1, 2], [2, 1]]
    assert pareto_front([(1, 3), (2, 2), (3, 1)]).tolist() == [[1, 3], [2, 2], [3, 1]]


def test_front_rejects_non_positive():
    with pytest.raises(InvalidArgument):
        pareto_front([(0, 1)])
    with pytest.raises(InsufficientData):
        pareto_front([])


def test_auc_hand_value():
    # front (1,3),(2,2),(3,1) in box [1,3]x[1,3]: (3-1)*1 + (2-1)*1 = 3 over area 4
    assert pareto_auc([(1, 3), (2, 2), (3, 1)]) == pytest.approx(3 / 4)
    assert pareto_auc([(1, 1), (3, 3)]) == 0.0


points = st.lists(st.tuples(st.floats(0.1, 10), st.floats(0.1, 10)), min_size=1, max_size=20)


@given(points)
def test_dominated_point_leaves_front_unchanged(pts):
    front = pareto_front(pts)
    t, e = max(p[0] for p in pts) + 1, max(p[1] for p in pts) + 1
    assert np.array_equal(pareto_front(pts + [(t, e)]), front)
    # every input point is weakly dominated by some front point
    for p in pts:
        assert any(f[0] <= p[0] and f[1] <= p[1] for f in front)


@given(points)
def test_auc_in_unit_interval(pts):
    assert 0.0 <= pareto_auc(pts) <= 1.0


def test_bootstrap_seeded():
    pts = [(1, 3), (2, 2), (3, 1), (2.5, 2.5), (1.5, 2.8)]
    assert bootstrap_pareto_auc(pts, 200, seed=3) == bootstrap_pareto_auc(pts, 200, seed=3)
    mean, std = bootstrap_pareto_auc(pts, 200, seed=3)
    assert 0 <= mean <= 1 and std >= 0


# ---------------------------------------------------------------- report


def test_report_json_marks_non_finite():
    rep = MetricReport(
        regression={"makespan": RegressionScores(1.0, 0.5, math.nan, 0.9)},
        ranking={"makespan": RankingScores(math.nan, math.nan, 1.0, True)},
        calibration={"makespan": {"95": CalibrationScores(0.95, 0.01, 0.02, 0.95, 1.0, 0.5, ((0.0, 1.0, 10, 0.9),))}},
        pareto_front=[(1.0, 2.0)],
        pareto_auc=(0.1, 0.01),
    )
    d = json.loads(rep.to_json())
    assert d["regression"]["makespan"]["mape"] is None
    assert "regression.makespan.mape" in d["non_finite"]
    assert d["ece"] == {"makespan": 0.01}
    assert rep.reliability_csv().splitlines()[1].startswith("makespan,95,0,")
    assert rep.pareto_csv().splitlines() == ["time,energy", "1.0,2.0"]
