import math
from fractions import Fraction

import numpy as np
import pytest
from scipy.optimize import linear_sum_assignment

from forestscan.evaluation import (
    DetectionCounts,
    attribute_regression,
    detection_metrics,
    dtm_metrics,
    evaluate_clouds,
    instance_ious,
    location_metrics,
    match_instances,
    semantic_metrics,
    stratified_counts,
    stratify_dominant,
)
from forestscan.inventory import DtmRaster
from forestscan.synthetic import generate_plot

from oracles import ols
from published_counts import PER_PLOT, STRATA, TOLERANCE_PP


# ---------------------------------------------------------------- semantic


def test_semantic_identical():
    labels = np.array([1, 2, 3, 4, 5, 5, 2])
    m = semantic_metrics(labels, labels)
    assert m.overall_accuracy == m.mean_accuracy == m.mean_iou == 1.0


def test_semantic_two_class_counts():
    ref = np.array([2] * 10 + [3] * 10)
    pred = np.array([2] * 8 + [3] * 2 + [3] * 9 + [2] * 1)
    m = semantic_metrics(ref, pred)
    assert m.overall_accuracy == pytest.approx(0.85)
    assert m.class_iou[1] == pytest.approx(8 / 11) and m.class_iou[2] == pytest.approx(9 / 12)
    assert m.mean_iou == pytest.approx((8 / 11 + 9 / 12) / 2)
    assert round(m.mean_iou, 4) == 0.7386
    assert np.isnan(m.class_iou[0])


def test_semantic_single_class_predictor():
    ref = np.array([1] * 5 + [2] * 3 + [4] * 2)
    m = semantic_metrics(ref, np.full(10, 1))
    assert m.class_iou[0] == pytest.approx(5 / 10)
    assert m.class_iou[1] == 0.0 and m.class_iou[3] == 0.0


def test_semantic_unlabeled_excluded_and_mismatch():
    m = semantic_metrics([0, 2, 2], [4, 2, 2])
    assert m.confusion.sum() == 2 and m.overall_accuracy == 1.0
    with pytest.raises(ValueError):
        semantic_metrics([1, 2], [1])


def test_semantic_class_permutation():
    rng = np.random.default_rng(0)
    ref = rng.integers(1, 6, 500)
    pred = np.where(rng.uniform(size=500) < 0.7, ref, rng.integers(1, 6, 500))
    perm = np.array([0, 3, 5, 1, 2, 4])  # class c -> perm[c]
    a, b = semantic_metrics(ref, pred), semantic_metrics(perm[ref], perm[pred])
    assert b.mean_iou == pytest.approx(a.mean_iou) and b.mean_accuracy == pytest.approx(a.mean_accuracy)
    np.testing.assert_allclose(b.class_iou[perm[1:] - 1], a.class_iou)


# ---------------------------------------------------------------- matching


def test_match_identical_and_split():
    labels = np.array([0, 0, 1, 1, -1])
    m = match_instances(labels, labels)
    assert [(r, p) for r, p, _ in m.matches] == [(0, 0), (1, 1)] and m.counts.FP == m.counts.FN == 0
    ref = np.array([0, 0, 0, 0])
    pred = np.array([3, 3, 7, 7])
    m = match_instances(ref, pred)
    assert m.matches == [(0, 3, 0.5)] and m.unmatched_predicted == [7]
    assert (m.counts.TP, m.counts.FP, m.counts.FN) == (1, 1, 0)


def _perturbed_labeling(rng, n_points=400, n_trees=5):
    ref = rng.integers(0, n_trees, n_points)
    pred = ref.copy()
    flip = rng.uniform(size=n_points) < rng.uniform(0.05, 0.5)
    pred[flip] = rng.integers(-1, n_trees + 2, flip.sum())
    if rng.uniform() < 0.5:
        pred[pred == 0] = 1  # merge two trees
    return ref, pred


def test_match_swap_symmetry():
    rng = np.random.default_rng(1)
    for _ in range(20):
        ref, pred = _perturbed_labeling(rng)
        a, b = match_instances(ref, pred).counts, match_instances(pred, ref).counts
        assert (a.TP, a.FP, a.FN) == (b.TP, b.FN, b.FP)


def test_match_agrees_with_optimal_assignment():
    rng = np.random.default_rng(2)
    disagreements = 0
    for _ in range(50):
        ref, pred = _perturbed_labeling(rng)
        ref_ids, pred_ids, iou = instance_ious(ref, pred)
        weights = np.where(iou >= 0.5, iou, 0.0)
        rows, cols = linear_sum_assignment(weights, maximize=True)
        optimal = {(int(ref_ids[r]), int(pred_ids[c])) for r, c in zip(rows, cols) if weights[r, c] > 0}
        greedy = {(r, p) for r, p, _ in match_instances(ref, pred).matches}
        disagreements += greedy != optimal
    # above 0.5 IoU each instance overlaps at most one partner by more than half, so both rules coincide
    assert disagreements == 0


# ---------------------------------------------------------------- detection metrics


@pytest.mark.parametrize("row", PER_PLOT + STRATA, ids=[r[0] for r in PER_PLOT + STRATA])
def test_detection_metrics_published_rows(row):
    _, n, detected, tp, expected = row
    m = detection_metrics(DetectionCounts.from_detected(n, detected, tp))
    got = (100 * m.completeness, 100 * m.omission, 100 * m.commission, 100 * m.f_score)
    for g, e in zip(got, expected):
        assert abs(g - e) <= TOLERANCE_PP + 1e-9


def test_detection_identities_are_exact():
    rng = np.random.default_rng(3)
    for _ in range(200):
        n, tp, fp = int(rng.integers(1, 100)), 0, int(rng.integers(0, 50))
        tp = int(rng.integers(0, n + 1))
        m = detection_metrics(DetectionCounts(n, tp, n - tp, fp))
        assert m.completeness == float(Fraction(tp, n))
        assert m.omission == float(1 - Fraction(tp, n))
        assert m.accuracy_index == float(Fraction(tp - fp, n))
        assert m.matching_score == float(Fraction(tp, n + fp))
        if tp:
            assert m.f_score == float(Fraction(2 * tp, 2 * tp + fp + (n - tp)))


def test_detection_undefined_values_flagged():
    m = detection_metrics(DetectionCounts(5, 0, 5, 0))
    assert m.f_score == 0.0 and "f_score" in m.flags and "precision" in m.flags
    with pytest.raises(ValueError):
        DetectionCounts(5, 3, 1, 0)


# ---------------------------------------------------------------- regression and location


def test_regression_trivial_cases():
    ref = np.array([10.0, 12.0, 15.0, 20.0])
    s = attribute_regression(ref, ref)
    assert (s.slope, s.r_squared, s.rmse, s.rmse_percent) == pytest.approx((1, 1, 0, 0))
    s = attribute_regression(ref, ref + 2.0)
    assert s.slope == pytest.approx(1) and s.r_squared == pytest.approx(1) and s.rmse == pytest.approx(2.0)
    s = attribute_regression(np.full(4, 3.0), ref)
    assert "zero_variance_reference" in s.flags and math.isnan(s.slope)
    s = attribute_regression([1.0, 2.0], [1.5, 2.5])
    assert s.rmse == pytest.approx(0.5) and "too_few_pairs" in s.flags


def test_regression_matches_normal_equations():
    rng = np.random.default_rng(4)
    ref = rng.uniform(5, 30, 20)
    pred = 0.9 * ref + 1.3 + rng.normal(0, 1.0, 20)
    s = attribute_regression(ref, pred)
    slope, intercept = ols(ref, pred)
    assert s.slope == pytest.approx(slope, abs=1e-9) and s.intercept == pytest.approx(intercept, abs=1e-9)
    resid = pred - (slope * ref + intercept)
    r2 = 1 - resid @ resid / np.sum((pred - pred.mean()) ** 2)
    assert s.r_squared == pytest.approx(r2, abs=1e-9)
    assert s.rmse == pytest.approx(math.sqrt(np.mean((pred - ref) ** 2)), abs=1e-12)
    assert s.rmse_percent == pytest.approx(s.rmse / ref.mean(), abs=1e-12)
    assert 0 <= s.p_value < 1e-6


def test_regression_affine_recovery():
    ref = np.linspace(1, 9, 9)
    s = attribute_regression(ref, 2.5 * ref - 4.0)
    assert s.slope == pytest.approx(2.5, abs=1e-9) and s.intercept == pytest.approx(-4.0, abs=1e-9)
    assert s.r_squared == pytest.approx(1.0, abs=1e-12)


def test_location_metrics():
    z = location_metrics([[1, 1], [2, 2]], [[1, 1], [2, 2]])
    assert (z.rmse_x, z.rmse_y, z.mean_rmse) == (0, 0, 0)
    one = location_metrics([[0, 0]], [[0.3, 0.4]])
    assert (one.rmse_x, one.rmse_y, one.mean_rmse) == pytest.approx((0.3, 0.4, 0.35))
    rng = np.random.default_rng(5)
    ref, pred = rng.normal(size=(30, 2)), rng.normal(size=(30, 2))
    m = location_metrics(ref, pred)
    assert m.rmse_x == pytest.approx(math.sqrt(np.mean((pred[:, 0] - ref[:, 0]) ** 2)))
    assert m.rmse_y == pytest.approx(math.sqrt(np.mean((pred[:, 1] - ref[:, 1]) ** 2)))


# ---------------------------------------------------------------- terrain and strata


def _raster(heights, covered=None):
    return DtmRaster((0.0, 0.0), 0.5, heights, np.ones(heights.shape, bool) if covered is None else covered)


def test_dtm_metrics():
    rng = np.random.default_rng(6)
    h = rng.normal(100, 1, size=(8, 9))
    assert dtm_metrics(_raster(h), _raster(h)).rmse_cm == 0.0
    assert dtm_metrics(_raster(h + 0.1), _raster(h)).rmse_cm == pytest.approx(10.0)
    other = rng.normal(100, 1, size=(8, 9))
    cov = rng.uniform(size=(8, 9)) < 0.8
    m = dtm_metrics(_raster(other, cov), _raster(h))
    assert m.rmse_cm == pytest.approx(100 * math.sqrt(np.mean((other - h)[cov] ** 2)))
    assert m.coverage == pytest.approx(cov.mean())
    with pytest.raises(ValueError):
        dtm_metrics(_raster(h[:, :4]), _raster(h))


def test_stratify():
    s = stratify_dominant({0: 30.0, 1: 12.0, 2: 9.0})
    assert s.threshold == pytest.approx(10.0) and s.dominant == [0, 1] and s.understory == [2]
    assert stratify_dominant({4: 7.0}).dominant == [4]


def test_stratified_counts_cross_stratum():
    ref = np.array([0, 0, 1, 1, 2, 2])
    pred = np.array([5, 5, 6, 6, 7, 7])
    matching = match_instances(ref, pred)
    counts = stratified_counts(matching, {0: 30.0, 1: 12.0, 2: 9.0}, {5: 29.0, 6: 8.0, 7: 9.5})
    # reference 1 is dominant but its prediction fell below the threshold
    assert counts["dominant"] == DetectionCounts(2, 1, 1, 0)
    assert counts["understory"] == DetectionCounts(1, 1, 0, 1)
    assert counts["all"] == DetectionCounts(3, 3, 0, 0)


# ---------------------------------------------------------------- full report


def test_evaluate_perfect_prediction():
    plot = generate_plot(n_trees=3, seed=2)
    report = evaluate_clouds(plot.cloud, plot.cloud, "p")
    det = report.detection["metrics"]
    assert det["f_score"] == 1.0 and report.semantic["mean_iou"] == 1.0
    assert report.attributes["height"]["rmse"] == 0.0
    assert report.location["mean_rmse"] == 0.0 and report.dtm["rmse_cm"] == 0.0
    assert report.flags == ["no_field_dbh"] and "dbh_field" not in report.attributes
    assert report.strata["all"]["counts"]["TP"] == 3


def test_evaluate_with_field_dbh_and_mismatch():
    plot = generate_plot(n_trees=3, seed=2)
    field = {t.tree_id: t.dbh_cm for t in plot.trees}
    report = evaluate_clouds(plot.cloud, plot.cloud, field_dbh=field)
    assert report.attributes["dbh_field"]["n"] == 3 and report.attributes["dbh_field"]["rmse_percent"] < 0.05
    with pytest.raises(ValueError):
        evaluate_clouds(plot.cloud.subset(np.arange(10)), plot.cloud)


def test_f_score_invariant_to_point_duplication():
    rng = np.random.default_rng(7)
    ref, pred = _perturbed_labeling(rng)
    a = detection_metrics(match_instances(ref, pred).counts)
    b = detection_metrics(match_instances(np.repeat(ref, 3), np.repeat(pred, 3)).counts)
    assert a == b
