import numpy as np
import pytest

from emg_transfer.errors import ConfigurationError, DomainError
from emg_transfer.services import lssvm
from emg_transfer.services.evaluation import balanced_accuracy
from emg_transfer.services.hl2l import (
    Hl2lModel,
    confidence_matrix,
    confidence_vector,
    hl2l_predict,
    hl2l_predict_batch,
    hl2l_train,
    model_from_dict,
    model_to_dict,
    stratified_split,
    stratified_split_indices,
)
from emg_transfer.services.kernels import KernelSpec
from emg_transfer.services.multi_adapt import source_score_table
from tests.conftest import make_blobs

RBF = KernelSpec.rbf(0.5)


class TestSplit:
    def test_default_fraction_per_class(self):
        labels = np.repeat([0, 1, 2], 100)
        first, second = stratified_split_indices(labels, 0.63, seed=0)
        for cls in range(3):
            assert np.sum(labels[first] == cls) == 63
            assert np.sum(labels[second] == cls) == 37

    def test_two_items_per_class_split_evenly(self):
        labels = np.array([0, 0, 1, 1])
        first, second = stratified_split_indices(labels, 0.5, seed=1)
        assert sorted(labels[first]) == [0, 1]
        assert sorted(labels[second]) == [0, 1]

    def test_parts_partition_the_input(self):
        labels = np.random.default_rng(0).integers(0, 3, 40)
        labels[:6] = [0, 0, 1, 1, 2, 2]
        first, second = stratified_split_indices(labels, 0.63, seed=2)
        assert np.intersect1d(first, second).size == 0
        np.testing.assert_array_equal(np.sort(np.concatenate([first, second])), np.arange(40))

    def test_same_seed_same_split(self):
        labels = np.repeat([0, 1], 10)
        a = stratified_split_indices(labels, 0.63, seed=9)
        b = stratified_split_indices(labels, 0.63, seed=9)
        np.testing.assert_array_equal(a[0], b[0])
        np.testing.assert_array_equal(a[1], b[1])

    def test_single_item_class_is_rejected(self):
        with pytest.raises(ConfigurationError):
            stratified_split_indices(np.array([0, 0, 1]), 0.63, seed=0)

    @pytest.mark.parametrize("fraction", [0.0, 1.0, 1.5])
    def test_fraction_out_of_range(self, fraction):
        with pytest.raises(ConfigurationError):
            stratified_split_indices(np.array([0, 0]), fraction, seed=0)

    def test_feature_set_split(self, blobs):
        part_a, part_b = stratified_split(blobs, 0.5, seed=3)
        assert len(part_a) + len(part_b) == len(blobs)
        assert part_a.class_counts() == {0: 4, 1: 4, 2: 4}


class TestConfidence:
    def test_dimension_and_layout(self, blobs, blobs_test, sources):
        first = lssvm.train_multiclass(blobs, RBF, 10.0)
        conf = confidence_matrix(first, sources, blobs_test.vectors)
        assert conf.shape == (len(blobs_test), 3 * 3)
        np.testing.assert_allclose(conf[:, :3], lssvm.decision_scores(first, blobs_test.vectors))
        for k, src in enumerate(sources):
            np.testing.assert_allclose(
                conf[:, 3 * (k + 1):3 * (k + 2)], lssvm.decision_scores(src, blobs_test.vectors)
            )

    def test_precomputed_table_gives_the_same_matrix(self, blobs, blobs_test, sources):
        first = lssvm.train_multiclass(blobs, RBF, 10.0)
        table = source_score_table(sources, blobs_test.vectors)
        np.testing.assert_allclose(
            confidence_matrix(first, sources, blobs_test.vectors, source_scores=table),
            confidence_matrix(first, sources, blobs_test.vectors),
        )

    def test_vector_is_a_matrix_row(self, blobs, blobs_test, sources):
        first = lssvm.train_multiclass(blobs, RBF, 10.0)
        row = confidence_vector(first, sources, blobs_test.vectors[2])
        np.testing.assert_allclose(row, confidence_matrix(first, sources, blobs_test.vectors)[2])

    def test_without_sources_only_target_scores(self, blobs, blobs_test):
        first = lssvm.train_multiclass(blobs, RBF, 10.0)
        assert confidence_matrix(first, [], blobs_test.vectors).shape == (len(blobs_test), 3)


class TestStacking:
    def test_trains_and_predicts_known_classes(self, blobs, blobs_test, sources):
        model = hl2l_train(blobs, sources, RBF, 10.0, seed=0)
        assert model.confidence_dim == 9
        labels, scores = hl2l_predict_batch(model, blobs_test.vectors)
        assert scores.shape == (len(blobs_test), 3)
        assert set(labels) <= {0, 1, 2}
        assert np.mean(labels == blobs_test.labels) >= 0.8

    def test_batch_agrees_with_single_predictions(self, blobs, blobs_test, sources):
        model = hl2l_train(blobs, sources, RBF, 10.0, seed=1)
        labels, scores = hl2l_predict_batch(model, blobs_test.vectors)
        for i in (0, 7, 19):
            label, row = hl2l_predict(model, blobs_test.vectors[i])
            assert label == labels[i]
            np.testing.assert_allclose(row, scores[i], atol=1e-12)

    def test_same_seed_same_model(self, blobs, blobs_test, sources):
        a = hl2l_train(blobs, sources, RBF, 10.0, seed=5)
        b = hl2l_train(blobs, sources, RBF, 10.0, seed=5)
        np.testing.assert_array_equal(
            hl2l_predict_batch(a, blobs_test.vectors)[1], hl2l_predict_batch(b, blobs_test.vectors)[1]
        )

    def test_first_layer_sees_only_its_part(self, blobs, sources):
        model = hl2l_train(blobs, sources, RBF, 10.0, seed=2, fraction=0.5)
        assert model.first.train_X.shape[0] == 12
        assert model.second.train_X.shape == (12, 9)

    def test_explicit_second_layer_parameters(self, blobs, sources):
        model = hl2l_train(
            blobs, sources, RBF, 10.0, kernel_second=KernelSpec.rbf(0.1), C_second=3.0, seed=0
        )
        assert model.second.C == 3.0
        assert model.second.kernel == KernelSpec.rbf(0.1)

    def test_linear_second_layer(self, blobs, sources):
        model = hl2l_train(blobs, sources, RBF, 10.0, second_kind="linear", seed=0)
        assert model.second.kernel == KernelSpec.linear()

    def test_second_layer_grid_search(self, sources):
        fs = make_blobs(10, seed=4)
        grid = lssvm.GridSpec(C=(1.0, 10.0), gamma=(0.01, 0.1))
        model = hl2l_train(fs, sources, RBF, 10.0, grid=grid, folds=3, seed=0)
        assert model.second.C in (1.0, 10.0)
        assert model.second.kernel.gamma in (0.01, 0.1)

    def test_class_set_must_match_sources(self, blobs, sources):
        with pytest.raises(DomainError):
            hl2l_train(blobs, sources, RBF, 10.0, classes=[0, 1, 2, 3])

    def test_serialized_model_predicts_identically(self, blobs, blobs_test, sources):
        model = hl2l_train(blobs, sources, RBF, 10.0, seed=3)
        restored = model_from_dict(model_to_dict(model), {s.subject_id: s for s in sources})
        np.testing.assert_allclose(
            hl2l_predict_batch(restored, blobs_test.vectors)[1],
            hl2l_predict_batch(model, blobs_test.vectors)[1],
            rtol=1e-12,
        )

    def test_unknown_source_in_document(self, blobs, sources):
        data = model_to_dict(hl2l_train(blobs, sources, RBF, 10.0, seed=0))
        with pytest.raises(DomainError):
            model_from_dict(data, {})


def _passthrough(dim: int) -> lssvm.MulticlassModel:
    """Linear model whose per-class scores are its input coordinates."""
    return lssvm.MulticlassModel(
        classes=np.arange(dim),
        alphas=np.eye(dim),
        biases=np.zeros(dim),
        train_X=np.eye(dim),
        kernel=KernelSpec.linear(),
        C=1.0,
    )


class TestLimitingCases:
    def test_one_hot_confidences_pick_their_class(self):
        model = Hl2lModel(first=_passthrough(4), sources=(), second=_passthrough(4), fraction=0.5)
        labels, scores = hl2l_predict_batch(model, np.eye(4))
        np.testing.assert_array_equal(labels, np.arange(4))
        np.testing.assert_allclose(scores, np.eye(4))

    def test_all_zero_confidences_resolve_to_the_first_class(self):
        model = Hl2lModel(first=_passthrough(4), sources=(), second=_passthrough(4), fraction=0.5)
        label, scores = hl2l_predict(model, np.zeros(4))
        assert label == 0
        np.testing.assert_array_equal(scores, 0.0)

    def test_without_sources_tracks_the_plain_classifier(self, blobs, blobs_test):
        plain = lssvm.predict_batch(lssvm.train_multiclass(blobs, RBF, 10.0), blobs_test.vectors)[0]
        stacked = hl2l_predict_batch(hl2l_train(blobs, [], RBF, 10.0, seed=0), blobs_test.vectors)[0]
        no_transfer = balanced_accuracy(blobs_test.labels, plain, 3)
        assert balanced_accuracy(blobs_test.labels, stacked, 3) >= no_transfer - 0.05

    def test_perfect_source_is_not_lost(self, blobs, blobs_test):
        twin = lssvm.train_multiclass(make_blobs(15, seed=41), RBF, 10.0, subject_id="twin")
        alone = balanced_accuracy(blobs_test.labels, lssvm.predict_batch(twin, blobs_test.vectors)[0], 3)
        stacked = hl2l_predict_batch(hl2l_train(blobs, [twin], RBF, 10.0, seed=0), blobs_test.vectors)[0]
        assert balanced_accuracy(blobs_test.labels, stacked, 3) >= alone - 0.02
