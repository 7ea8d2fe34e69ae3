"""Tests for anomaly scoring, calibration, the decision rule, and metrics."""

import itertools

import numpy as np
import pytest
from hypothesis import given, strategies as st

from oodfdd import detect
from oodfdd.uncertainty import McPrediction


def _mc(mean, variance):
    mean = np.asarray(mean, dtype=np.float64)
    variance = np.asarray(variance, dtype=np.float64)
    return McPrediction(samples=np.zeros((2, mean.size)), mean=mean, variance=variance)


# ---------------------------------------------------------------------------
# scores


def test_clf_scores_confident_normal():
    assert np.allclose(detect.clf_anomaly_scores(_mc([1, 0], [0, 0])), [0.0, 0.0])


def test_clf_scores_confident_fault():
    assert np.allclose(detect.clf_anomaly_scores(_mc([0, 1], [0, 0])), [1.0, 1.0])


def test_clf_scores_formula():
    s = detect.clf_anomaly_scores(_mc([0.6, 0.4], [0.04, 0.04]))
    assert np.allclose(s, [0.44, 0.44], atol=1e-12)


def test_clf_scores_multiclass():
    s = detect.clf_anomaly_scores(_mc([0.5, 0.3, 0.2], [0.01, 0.02, 0.03]))
    assert np.allclose(s, [0.51, 0.32, 0.23], atol=1e-12)


def test_clf_scores_sigmoid_expansion():
    # a single sigmoid output makes both channel scores mu + var
    s = detect.clf_anomaly_scores(_mc([0.3], [0.02]))
    assert np.allclose(s, [0.32, 0.32], atol=1e-12)


def test_clf_scores_batch_matches_single():
    rng = np.random.default_rng(0)
    mean = rng.random((20, 4))
    mean /= mean.sum(axis=1, keepdims=True)
    var = rng.random((20, 4)) * 0.1
    batch = detect.clf_anomaly_scores_batch(mean, var)
    for i in range(20):
        single = detect.clf_anomaly_scores(_mc(mean[i], var[i]))
        assert np.array_equal(batch[i], single)
    sig = detect.clf_anomaly_scores_batch(mean[:, :1], var[:, :1])
    assert sig.shape == (20, 2)
    assert np.allclose(sig[:, 0], sig[:, 1], atol=1e-12)


def test_rec_score_trivial_cases():
    assert detect.rec_anomaly_score([1.0, 2.0], [1.0, 2.0]) == 0.0
    assert detect.rec_anomaly_score([1.0, 1.0], [0.0, 0.0]) == 1.0
    with pytest.raises(ValueError):
        detect.rec_anomaly_score([1.0, 2.0], [1.0])


def test_rec_scores_batch():
    mu = np.array([[1.0, 1.0], [0.0, 0.0]])
    x = np.zeros((2, 2))
    assert np.allclose(detect.rec_anomaly_scores_batch(mu, x), [1.0, 0.0])


# ---------------------------------------------------------------------------
# calibration


def test_quantile_interpolation_example():
    scores = np.arange(1.0, 101.0).reshape(-1, 1)
    thr = detect.calibrate_thresholds(scores, 0.05)
    assert abs(thr.clf_thresholds[0] - 95.05) < 1e-9


def test_identical_scores_degenerate():
    scores = np.full((60, 1), 3.5)
    thr = detect.calibrate_thresholds(scores, 0.1, rec_scores=np.full(60, 3.5))
    assert thr.clf_thresholds[0] == 3.5
    assert thr.rec_threshold == 3.5
    # strict > means nothing is flagged on the calibration data itself
    assert np.sum(scores[:, 0] > thr.clf_thresholds[0]) == 0


def test_calibration_flag_rate_near_alpha():
    rng = np.random.default_rng(1)
    scores = rng.normal(0, 1, (500, 2))
    for alpha in (0.05, 0.1):
        thr = detect.calibrate_thresholds(scores, alpha)
        for j in range(2):
            rate = np.mean(scores[:, j] > thr.clf_thresholds[j])
            assert alpha - 1.0 / 500 <= rate <= alpha + 1.0 / 500


def test_calibration_preconditions():
    with pytest.raises(ValueError):
        detect.calibrate_thresholds(np.zeros((49, 1)), 0.1)
    with pytest.raises(ValueError):
        detect.calibrate_thresholds(np.zeros((60, 1)), 0.0)
    with pytest.raises(ValueError):
        detect.calibrate_thresholds(np.zeros((60, 1)), 1.0)
    with pytest.raises(ValueError):
        detect.calibrate_thresholds(None, 0.1)
    with pytest.raises(ValueError):
        detect.calibrate_thresholds(None, 0.1, rec_scores=np.zeros(10))


# ---------------------------------------------------------------------------
# decision rule


def _thr(values, alpha=0.1):
    return detect.ThresholdSet(
        clf_thresholds=np.asarray(values, dtype=np.float64), rec_threshold=None, alpha=alpha
    )


def test_predict_all_below():
    pred = detect.predict_labels(
        detect.AnomalyScores(clf=np.array([0.1, 0.1, 0.1])), _thr([0.2, 0.2, 0.2])
    )
    assert pred.Y == set()
    assert pred.z is False
    assert not pred.b.any()


def test_predict_rule_example():
    pred = detect.predict_labels(
        detect.AnomalyScores(clf=np.array([0.5, 0.9, 0.1])), _thr([0.2, 0.2, 0.2])
    )
    assert pred.Y == {0, 1}
    assert pred.z is True


def test_predict_strict_inequality_at_boundary():
    pred = detect.predict_labels(
        detect.AnomalyScores(clf=np.array([0.2, 0.3])), _thr([0.2, 0.2])
    )
    assert 0 not in pred.Y and 1 in pred.Y


def test_predict_batch_matches_single():
    rng = np.random.default_rng(2)
    scores = rng.random((30, 4))
    thr = _thr(rng.random(4))
    b, z = detect.predict_labels_batch(scores, thr)
    for i in range(30):
        single = detect.predict_labels(detect.AnomalyScores(clf=scores[i]), thr)
        assert np.array_equal(b[i], single.b)
        assert z[i] == single.z


@given(
    st.integers(2, 5),
    st.integers(0, 2**31 - 1),
    st.integers(0, 4),
    st.floats(0.01, 2.0),
)
def test_monotonicity_properties(c, seed, idx, bump):
    rng = np.random.default_rng(seed)
    scores = rng.random(c)
    thr = _thr(rng.random(c))
    base = detect.predict_labels(detect.AnomalyScores(clf=scores), thr)
    # raising one score never removes a label
    raised = scores.copy()
    raised[idx % c] += bump
    after = detect.predict_labels(detect.AnomalyScores(clf=raised), thr)
    assert base.Y <= after.Y
    # raising one threshold never adds a label
    higher = thr.clf_thresholds.copy()
    higher[idx % c] += bump
    tightened = detect.predict_labels(detect.AnomalyScores(clf=scores), _thr(higher))
    assert tightened.Y <= base.Y
    # disjunction consistency
    for p in (base, after, tightened):
        assert p.z == (len(p.Y) > 0)


# ---------------------------------------------------------------------------
# diagnostic accuracy


def test_diag_acc_examples():
    assert detect.diagnostic_accuracy({1}, 1) == 1.0
    assert detect.diagnostic_accuracy({0, 1}, 1) == 1.0  # normal label is free
    assert detect.diagnostic_accuracy({1, 2}, 1) == 0.5
    assert detect.diagnostic_accuracy({2}, 1) == 0.0
    assert detect.diagnostic_accuracy(set(), 1) == 0.0
    assert detect.diagnostic_accuracy({0}, 1) == 0.0
    assert detect.diagnostic_accuracy({1, 2, 3}, 3) == pytest.approx(1 / 3)


def test_diag_acc_undefined_for_normals():
    with pytest.raises(ValueError):
        detect.diagnostic_accuracy({1}, 0)


def test_diag_acc_exhaustive_oracle():
    # every subset of {0,1,2,3} with |Y| <= 3, every true fault label
    universe = (0, 1, 2, 3)
    for size in range(4):
        for combo in itertools.combinations(universe, size):
            y_pred = set(combo)
            for y_true in (1, 2, 3):
                got = detect.diagnostic_accuracy(y_pred, y_true)
                if y_true not in y_pred:
                    expected = 0.0
                else:
                    expected = 1.0 / len([j for j in y_pred if j != 0])
                assert got == expected, (y_pred, y_true)


def test_diagnostic_accuracies_matrix():
    b = np.array([[True, True, False], [False, False, True], [False, True, False]])
    y = np.array([1, 0, 2])
    out = detect.diagnostic_accuracies(b, y)
    assert out[0] == 1.0
    assert np.isnan(out[1])
    assert out[2] == 0.0


# ---------------------------------------------------------------------------
# binary accuracy and sweeps


def test_binary_accuracy_conventions():
    flags = np.array([False, False, True, True, False])
    groups = ["normal", "normal", "fault:1", "fault:1", "fault:1"]
    assert detect.binary_accuracy(flags, groups, "normal") == 1.0
    assert detect.binary_accuracy(flags, groups, "fault:1") == pytest.approx(2 / 3)
    with pytest.raises(ValueError):
        detect.binary_accuracy(flags, groups, "unknown")


def test_group_binary_accuracies_order_and_values():
    flags = np.array([False, True, True])
    groups = ["normal", "fault:1", "normal"]
    table = detect.group_binary_accuracies(flags, groups)
    assert list(table) == ["normal", "fault:1"]
    assert table["normal"] == 0.5
    assert table["fault:1"] == 1.0


def test_precision_recall_threshold_below_min():
    scores = np.array([0.1, 0.2, 0.3, 0.4])
    flags = np.array([False, False, True, True])
    p, r = detect.precision_recall_at(scores, flags, 0.0)
    assert r == 1.0
    assert p == 0.5  # fault prevalence


def test_precision_recall_perfect_separation():
    scores = np.array([0.1, 0.2, 0.8, 0.9])
    flags = np.array([False, False, True, True])
    thresholds, precision, recall = detect.precision_recall_sweep(scores, flags, k=9)
    hit = (precision == 1.0) & (recall == 1.0)
    assert hit.any()
    assert len(thresholds) == len(precision) == len(recall) == 9


def test_precision_recall_matches_brute_force():
    rng = np.random.default_rng(3)
    scores = rng.random(40)
    flags = rng.random(40) < 0.3
    flags[0], flags[1] = True, False
    thresholds, precision, recall = detect.precision_recall_sweep(scores, flags, k=11)
    for t, p, r in zip(thresholds, precision, recall):
        tp = fp = fn = 0
        for s, f in zip(scores, flags):
            if s > t and f:
                tp += 1
            elif s > t and not f:
                fp += 1
            elif s <= t and f:
                fn += 1
        assert p == (1.0 if tp + fp == 0 else tp / (tp + fp))
        assert r == tp / (tp + fn)


def test_precision_recall_degenerate_inputs():
    with pytest.raises(ValueError):
        detect.precision_recall_sweep(np.array([1.0, 2.0]), np.array([True, True]))
    with pytest.raises(ValueError):
        detect.precision_recall_sweep(np.array([1.0, 2.0]), np.array([False, False]))


# ---------------------------------------------------------------------------
# report type


def test_metrics_report_validates_and_serializes(tmp_path):
    thr = detect.ThresholdSet(
        clf_thresholds=np.array([0.5, 0.6]), rec_threshold=0.25, alpha=0.1
    )
    report = detect.MetricsReport(
        binary_acc={"normal": 0.9, "fault:1": 0.8},
        diag_acc={"fault:1": 0.75},
        thresholds=thr,
    )
    table = tmp_path / "table.csv"
    report.to_csv(table)
    lines = table.read_text().strip().splitlines()
    assert lines[0] == "group,binary_accuracy,diagnostic_accuracy"
    assert lines[1] == "normal,0.900000,"
    assert lines[2] == "fault:1,0.800000,0.750000"

    thrfile = tmp_path / "thr.csv"
    report.thresholds_to_csv(thrfile)
    rows = thrfile.read_text().strip().splitlines()
    assert rows[0] == "channel,threshold"
    assert rows[1] == "alpha,0.100000"
    assert rows[2] == "clf0,0.500000"
    assert rows[4] == "rec,0.250000"

    with pytest.raises(ValueError):
        detect.MetricsReport(binary_acc={"normal": 1.2}, diag_acc={}, thresholds=thr)
