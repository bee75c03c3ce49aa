"""Word-to-task probability producers and the task classification loss."""

import numpy as np
import pytest

from taskgrouper.heads import WordInstance
from taskgrouper.taskprob import (
    CharsetSpec,
    TaskClassifier,
    p_wt_from_coverage,
    p_wt_from_ground_truth,
    task_classify,
    task_loss,
    universal_charset,
)
from taskgrouper.tensor import Tensor, grad_check


def word(labels, gt_task=None, d=4, rng=None):
    rng = rng or np.random.default_rng(0)
    labels = np.asarray(labels)
    return WordInstance(rng.normal(size=(len(labels), d)), labels, gt_task=gt_task)


CHARSETS = [
    CharsetSpec(0, (1, 2, 3, 4)),
    CharsetSpec(1, (3, 4, 5, 6)),
]


def test_charset_spec_rejects_duplicates_and_empty():
    with pytest.raises(ValueError):
        CharsetSpec(0, (1, 1, 2))
    with pytest.raises(ValueError):
        CharsetSpec(0, ())


def test_universal_charset_is_sorted_union():
    assert universal_charset(CHARSETS) == (1, 2, 3, 4, 5, 6)


class TestGroundTruthRows:
    def test_one_hot_row(self):
        p = p_wt_from_ground_truth([word([1, 2], gt_task=2)], [CharsetSpec(i, (9 + i,)) for i in range(4)])
        np.testing.assert_array_equal(p.values, [[0, 0, 1, 0]])

    def test_batch_rows_sum_to_one(self):
        batch = [word([1], gt_task=0), word([5], gt_task=1), word([3], gt_task=0)]
        p = p_wt_from_ground_truth(batch, CHARSETS)
        assert p.values.shape == (3, 2)
        np.testing.assert_allclose(p.values.sum(axis=1), 1.0)
        assert set(np.unique(p.values)) <= {0.0, 1.0}

    def test_missing_id_falls_back_to_coverage(self):
        batch = [word([1, 2], gt_task=0), word([3, 3, 5, 6], gt_task=None)]
        p = p_wt_from_ground_truth(batch, CHARSETS)
        np.testing.assert_array_equal(p.values[0], [1.0, 0.0])
        # coverage raw scores: task0 supports {3,3} -> 0.5, task1 supports all -> 1.0
        np.testing.assert_allclose(p.values[1], [1 / 3, 2 / 3])
        np.testing.assert_allclose(p.values.sum(axis=1), 1.0)

    def test_out_of_range_id_rejected(self):
        with pytest.raises(ValueError):
            p_wt_from_ground_truth([word([1], gt_task=5)], CHARSETS)


class TestCoverageRows:
    def test_exclusive_word(self):
        p = p_wt_from_coverage([word([1, 2, 1])], CHARSETS)
        np.testing.assert_allclose(p.values, [[1.0, 0.0]])

    def test_partial_overlap_normalizes(self):
        # 4 chars all in task 0; two of them (3, 4) also in task 1
        p = p_wt_from_coverage([word([1, 2, 3, 4])], CHARSETS)
        np.testing.assert_allclose(p.values, [[2 / 3, 1 / 3]])

    def test_uncovered_word_is_uniform(self):
        p = p_wt_from_coverage([word([99, 98])], CHARSETS)
        np.testing.assert_allclose(p.values, [[0.5, 0.5]])

    def test_rows_stochastic_on_random_batches(self):
        rng = np.random.default_rng(21)
        for _ in range(100):
            labels = rng.integers(0, 9, size=rng.integers(1, 7))
            p = p_wt_from_coverage([word(labels)], CHARSETS)
            np.testing.assert_allclose(p.values.sum(axis=1), 1.0, atol=1e-12)

    def test_permutation_equivariance(self):
        batch = [word(np.array([1, 3, 5, 6])), word(np.array([2, 4]))]
        forward = p_wt_from_coverage(batch, CHARSETS).values
        swapped = p_wt_from_coverage(batch, CHARSETS[::-1]).values
        np.testing.assert_array_equal(swapped, forward[:, ::-1])

    def test_features_are_ignored(self):
        labels = np.array([1, 3])
        a = WordInstance(np.zeros((2, 4)), labels)
        b = WordInstance(np.random.default_rng(1).normal(size=(2, 4)) * 100, labels)
        np.testing.assert_array_equal(
            p_wt_from_coverage([a], CHARSETS).values,
            p_wt_from_coverage([b], CHARSETS).values,
        )


class TestTaskLoss:
    def test_uniform_logits_give_log_t(self):
        logits = Tensor(np.zeros((3, 4)))
        loss = task_loss(logits, [0, 3, 2])
        np.testing.assert_allclose(loss.item(), np.log(4.0), atol=1e-12)

    def test_confident_correct_prediction_is_free(self):
        logits = Tensor(np.array([[50.0, 0.0, 0.0]]))
        assert task_loss(logits, [0]).item() < 1e-9

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(6)
        gt = rng.integers(0, 4, size=5)

        def fn(t):
            return task_loss(t, gt)

        assert grad_check(fn, Tensor(rng.normal(size=(5, 4))), step=1e-5) < 1e-4

    def test_out_of_range_task_rejected(self):
        with pytest.raises(ValueError):
            task_loss(Tensor(np.zeros((1, 3))), [3])


class TestTaskClassifier:
    def test_logits_shape_and_loss_flow(self):
        rng = np.random.default_rng(2)
        clf = TaskClassifier(feature_dim=4, hidden_size=8, num_tasks=2, rng=rng)
        batch = [word([1, 2], gt_task=0, rng=rng), word([5], gt_task=1, rng=rng)]
        logits = task_classify(clf, batch)
        assert logits.shape == (2, 2)
        loss = task_loss(logits, [w.gt_task for w in batch])
        loss.backward()
        assert all(p.grad is not None for p in clf.parameters())

    def test_feature_dim_mismatch(self):
        clf = TaskClassifier(feature_dim=6, hidden_size=4, num_tasks=2, rng=np.random.default_rng(0))
        with pytest.raises(ValueError):
            clf.logits([word([1, 2], d=4)])

    def test_training_separates_two_pooled_clusters(self):
        rng = np.random.default_rng(10)
        from taskgrouper.optim import Adam

        clf = TaskClassifier(feature_dim=4, hidden_size=16, num_tasks=2, rng=rng)
        centers = {0: np.array([1.0, 0, 0, 0]), 1: np.array([0, 1.0, 0, 0])}

        def make_batch(n):
            batch = []
            for _ in range(n):
                task = int(rng.integers(0, 2))
                feats = centers[task] + rng.normal(0, 0.2, size=(3, 4))
                batch.append(WordInstance(feats, np.array([1, 2, 3]), gt_task=task))
            return batch

        opt = Adam(clf.parameters(), lr=3e-3)
        for _ in range(150):
            batch = make_batch(16)
            loss = task_loss(clf.logits(batch), [w.gt_task for w in batch])
            opt.zero_grad()
            loss.backward()
            opt.step()
        test_batch = make_batch(100)
        pred = clf.logits(test_batch).data.argmax(axis=1)
        acc = np.mean(pred == [w.gt_task for w in test_batch])
        assert acc > 0.9
