import numpy as np
import pandas as pd
import pytest
from scipy.stats import pearsonr
from sklearn.metrics import balanced_accuracy_score, confusion_matrix

from emg_transfer.errors import ConfigurationError, DomainError
from emg_transfer.services.evaluation import (
    ConfusionMatrix,
    LearningCurve,
    MethodSettings,
    aggregate_curves,
    balanced_accuracy,
    class_correlation,
    confusion,
    curve_order,
    overlap_percentage,
    overlap_table,
    per_class_recall,
    run_learning_curve,
    topk_histogram,
    write_confusion,
    write_histogram,
)

METHODS = ["no_transfer", "prior_features", "multi_adapt", "mkal", "hl2l"]


def _settings(**overrides):
    params = dict(C=10.0, gamma=0.5, classes=np.arange(3))
    params.update(overrides)
    return MethodSettings(**params)


class TestBalancedAccuracy:
    def test_perfect_prediction(self):
        y = [0, 1, 2, 2, 1]
        assert balanced_accuracy(y, y, 3) == 1.0

    def test_half_right_binary(self):
        assert balanced_accuracy([0, 0, 1, 1], [0, 1, 0, 1], 2) == pytest.approx(0.5)

    def test_agrees_with_sklearn(self):
        rng = np.random.default_rng(0)
        y_true = np.concatenate([np.arange(4), rng.integers(0, 4, 60)])
        y_pred = rng.integers(0, 4, y_true.shape[0])
        assert balanced_accuracy(y_true, y_pred, 4) == pytest.approx(balanced_accuracy_score(y_true, y_pred))

    def test_random_instances_match_counting(self):
        rng = np.random.default_rng(7)
        for _ in range(100):
            G = int(rng.integers(2, 7))
            n = int(rng.integers(G, 40))
            y_true = np.concatenate([np.arange(G), rng.integers(0, G, n - G)])
            y_pred = rng.integers(0, G, y_true.shape[0])
            recalls = [np.mean(y_pred[y_true == g] == g) for g in range(G)]
            assert balanced_accuracy(y_true, y_pred, G) == pytest.approx(np.mean(recalls), abs=1e-9)
            cm = confusion(y_true, y_pred, G)
            for t in range(G):
                for p in range(G):
                    share = np.sum((y_true == t) & (y_pred == p)) / np.sum(y_true == t)
                    assert cm.matrix[p, t] == pytest.approx(share, abs=1e-12)

    def test_absent_classes_are_skipped(self):
        recall = per_class_recall([0, 0, 2], [0, 1, 2], 3)
        assert np.isnan(recall[1])
        assert balanced_accuracy([0, 0, 2], [0, 1, 2], 3) == pytest.approx(0.75)

    def test_invalid_inputs(self):
        with pytest.raises(DomainError):
            balanced_accuracy([], [], 2)
        with pytest.raises(DomainError):
            balanced_accuracy([0, 1], [0], 2)
        with pytest.raises(DomainError):
            balanced_accuracy([0, 3], [0, 1], 3)


class TestConfusion:
    def test_perfect_prediction_is_identity(self):
        cm = confusion([0, 1, 2, 1], [0, 1, 2, 1], 3)
        np.testing.assert_array_equal(cm.matrix, np.eye(3))
        np.testing.assert_array_equal(cm.support, [1, 2, 1])

    def test_constant_prediction_fills_the_first_row(self):
        cm = confusion([0, 1, 2, 2], [0, 0, 0, 0], 3)
        np.testing.assert_array_equal(cm.matrix[0], [1.0, 1.0, 1.0])
        np.testing.assert_array_equal(cm.matrix[1:], 0.0)

    def test_matches_sklearn_tally(self):
        rng = np.random.default_rng(1)
        y_true = np.concatenate([np.arange(5), rng.integers(0, 5, 80)])
        y_pred = rng.integers(0, 5, y_true.shape[0])
        cm = confusion(y_true, y_pred, 5)
        counts = confusion_matrix(y_true, y_pred, labels=range(5)).T.astype(float)
        np.testing.assert_allclose(cm.matrix, counts / counts.sum(axis=0))
        np.testing.assert_allclose(cm.matrix.sum(axis=0), 1.0)

    def test_empty_column_stays_zero(self):
        cm = confusion([0, 0, 1], [0, 1, 1], 3)
        np.testing.assert_array_equal(cm.matrix[:, 2], 0.0)
        assert cm.empty_columns == [2]


class TestHistograms:
    def test_topk_sorted_with_ties_by_class_id(self):
        matrix = np.array([[0.5, 0.0, 0.2], [0.25, 1.0, 0.2], [0.25, 0.0, 0.6]])
        cm = ConfusionMatrix(matrix=matrix, support=np.ones(3, dtype=np.int64))
        hist = topk_histogram(cm, 2)
        assert hist[0] == [(0, 0.5), (1, 0.25)]
        assert hist[1] == [(1, 1.0), (0, 0.0)]
        assert hist[2] == [(2, 0.6), (0, 0.2)]

    def test_topk_matches_sorting_oracle(self):
        rng = np.random.default_rng(11)
        for _ in range(100):
            G = int(rng.integers(2, 8))
            k = int(rng.integers(1, G + 1))
            # coarse shares so that ties are common
            matrix = rng.integers(0, 4, (G, G)).astype(float) / 4.0
            cm = ConfusionMatrix(matrix=matrix, support=np.ones(G, dtype=np.int64))
            hist = topk_histogram(cm, k)
            for t in range(G):
                column = matrix[:, t]
                expected = sorted(range(G), key=lambda p: (-column[p], p))[:k]
                assert [p for p, _ in hist[t]] == expected
                assert [f for _, f in hist[t]] == [column[p] for p in expected]

    def test_k_out_of_range(self):
        cm = confusion([0, 1], [0, 1], 2)
        with pytest.raises(DomainError):
            topk_histogram(cm, 3)

    def test_overlap_counts_classes_above_threshold(self):
        a = [[(0, 0.6), (1, 0.2), (2, 0.1), (3, 0.1)], [(1, 0.7), (0, 0.1), (2, 0.1), (3, 0.1)]]
        b = [[(0, 0.5), (2, 0.3), (1, 0.1), (4, 0.1)], [(4, 0.5), (5, 0.3), (1, 0.1), (6, 0.1)]]
        res = overlap_percentage(a, b, threshold=3)
        assert (res.matches, res.total) == (1, 2)
        assert res.percentage == pytest.approx(50.0)
        assert str(res) == "50.0% (1/2)"

    def test_overlap_needs_matching_shapes(self):
        with pytest.raises(DomainError):
            overlap_percentage([[(0, 1.0)]], [[(0, 1.0)], [(1, 1.0)]])

    def test_overlap_table_rows(self):
        cm = confusion([0, 1, 2], [0, 1, 2], 3)
        hist = topk_histogram(cm, 3)
        table = overlap_table({("a", 10): hist, ("b", 10): hist, ("a", 20): hist}, threshold=3)
        kinds = sorted(zip(table["kind"], table["method_a"], table["method_b"]))
        assert kinds == [("methods", "a", "b"), ("steps", "a", "a")]
        np.testing.assert_allclose(table["percentage"], 100.0)

    def test_histogram_file_uses_reported_labels(self, tmp_path):
        cm = confusion([0, 1, 1], [0, 1, 0], 2)
        frame = pd.read_csv(write_histogram(topk_histogram(cm, 2), tmp_path / "h.csv"))
        assert list(frame.columns) == ["true", "rank", "predicted", "fraction"]
        assert set(frame["true"]) == {1, 2}
        assert frame.loc[(frame["true"] == 2) & (frame["rank"] == 1), "fraction"].item() == pytest.approx(0.5)


class TestCorrelation:
    def test_matches_pearson(self):
        rng = np.random.default_rng(2)
        a, b = rng.uniform(0.1, 1, 6), rng.uniform(0.1, 1, 6)
        frame = class_correlation({"x": a, "y": b})
        assert frame.loc["x", "y"] == pytest.approx(pearsonr(a, b)[0])
        assert frame.loc["x", "x"] == 1.0
        assert frame.loc["y", "x"] == frame.loc["x", "y"]

    def test_random_instances_match_pearson(self):
        rng = np.random.default_rng(12)
        for _ in range(100):
            G = int(rng.integers(3, 10))
            a, b = rng.uniform(0.05, 1, G), rng.uniform(0.05, 1, G)
            frame = class_correlation({"a": a, "b": b})
            assert frame.loc["a", "b"] == pytest.approx(pearsonr(a, b)[0], abs=1e-9)

    def test_missing_class_is_left_out_of_the_pair(self):
        a = np.array([0.9, 0.4, np.nan, 0.7, 0.2])
        b = np.array([0.8, 0.5, 0.6, 0.3, 0.1])
        frame = class_correlation({"a": a, "b": b})
        keep = np.isfinite(a)
        assert frame.loc["a", "b"] == pytest.approx(pearsonr(a[keep], b[keep])[0], abs=1e-9)
        assert frame.loc["a", "a"] == 1.0
        assert frame.notna().all().all()

    def test_missing_peak_class_does_not_poison_the_normalization(self):
        # a NaN in the largest position must not turn the whole vector into NaN
        a = np.array([np.nan, 0.4, 0.6, 0.2])
        b = np.array([0.9, 0.3, 0.8, 0.1])
        frame = class_correlation({"a": a, "b": b, "c": b[::-1].copy()})
        assert not np.isnan(frame.loc["a", "b"])
        assert not np.isnan(frame.loc["a", "c"])

    def test_constant_vector_is_undefined(self):
        frame = class_correlation({"flat": [0.5, 0.5, 0.5], "other": [0.1, 0.9, 0.4]})
        assert np.isnan(frame.loc["flat", "other"])
        assert np.isnan(frame.loc["flat", "flat"])
        assert frame.loc["other", "other"] == 1.0

    def test_all_zero_vector_is_undefined(self):
        frame = class_correlation({"zero": [0.0, 0.0], "other": [0.2, 0.8]})
        assert np.isnan(frame.loc["zero", "other"])

    def test_needs_two_settings(self):
        with pytest.raises(DomainError):
            class_correlation({"x": [1.0, 2.0]})


class TestCurves:
    def test_steps_must_increase(self):
        with pytest.raises(DomainError):
            LearningCurve(steps=(10, 10))

    def test_curve_order(self):
        np.testing.assert_array_equal(curve_order(4, "prefix", 0), [0, 1, 2, 3])
        shuffled = curve_order(10, "shuffled", 5)
        np.testing.assert_array_equal(np.sort(shuffled), np.arange(10))
        np.testing.assert_array_equal(shuffled, curve_order(10, "shuffled", 5))
        with pytest.raises(ConfigurationError):
            curve_order(3, "random", 0)

    def test_stratified_order_deals_classes_in_turn(self):
        np.testing.assert_array_equal(curve_order(6, "stratified", 0, [0, 0, 0, 1, 1, 2]), [0, 3, 5, 1, 4, 2])
        first = curve_order(9, "stratified", 0, [2, 2, 2, 0, 0, 0, 1, 1, 1])[:3]
        np.testing.assert_array_equal(first, [3, 6, 0])
        with pytest.raises(ConfigurationError):
            curve_order(3, "stratified", 0)
        with pytest.raises(DomainError):
            curve_order(3, "stratified", 0, [0, 1])

    def test_aggregate_mean_best_and_worst(self):
        frame = pd.DataFrame(
            {
                "target": ["a", "a", "b", "b"],
                "step": [1, 2, 1, 2],
                "method": ["m"] * 4,
                "balanced_accuracy": [0.5, 0.7, 0.9, 1.0],
            }
        )
        summary = aggregate_curves(frame)
        first = summary.iloc[0]
        assert first["mean"] == pytest.approx(0.7)
        assert (first["best"], first["worst"]) == (0.9, 0.5)
        assert (first["best_target"], first["worst_target"]) == ("b", "a")
        assert summary.iloc[1]["mean"] == pytest.approx(0.85)

    def test_every_method_scores_on_a_shuffled_pool(self, blobs, blobs_test, sources):
        result = run_learning_curve(
            blobs, blobs_test, sources, METHODS, [12, 24], _settings(), order="shuffled"
        )
        frame = result.curve.to_frame()
        assert len(frame) == 10
        full = frame[frame["step"] == 24].set_index("method")["balanced_accuracy"]
        assert full["no_transfer"] == pytest.approx(1.0)
        assert full.notna().all()
        assert set(result.confusions) >= {(m, 24) for m in METHODS}

    def test_single_class_prefix_scores_nan(self, blobs, blobs_test):
        # the pool is sorted by class, so its first eight items are all rest
        result = run_learning_curve(blobs, blobs_test, [], ["no_transfer"], [8, 24], _settings(), order="prefix")
        scores = result.curve.scores["no_transfer"]
        assert np.isnan(scores[0])
        assert scores[1] == pytest.approx(1.0)
        assert ("no_transfer", 8) not in result.confusions

    def test_default_order_covers_every_class_early(self, blobs, blobs_test):
        result = run_learning_curve(blobs, blobs_test, [], ["no_transfer"], [6, 24], _settings())
        assert not np.isnan(result.curve.scores["no_transfer"][0])
        assert ("no_transfer", 6) in result.confusions

    def test_step_beyond_the_pool(self, blobs, blobs_test):
        with pytest.raises(ConfigurationError):
            run_learning_curve(blobs, blobs_test, [], ["no_transfer"], [30], _settings())

    def test_unknown_method_is_not_trainable(self, blobs, blobs_test):
        result = run_learning_curve(blobs, blobs_test, [], ["magic"], [24], _settings())
        assert np.isnan(result.curve.scores["magic"][0])

    def test_confusion_file_layout(self, tmp_path):
        cm = confusion([0, 1, 2], [0, 2, 2], 3)
        frame = pd.read_csv(write_confusion(cm, tmp_path / "c.csv"), index_col=0)
        assert frame.index.name == "predicted"
        assert list(frame.index) == [1, 2, 3]
        assert list(frame.columns) == ["1", "2", "3"]
        assert frame.loc[3, "2"] == pytest.approx(1.0)
