"""Recognition heads: forward contract, sequence loss, integrated loss, pruning."""

import numpy as np
import pytest

from taskgrouper.heads import (
    START_CODE,
    RecognitionHead,
    UnsupportedCharacterError,
    WordInstance,
    head_forward,
    integrated_loss,
    prune_head,
    seq_loss,
    stack_columns,
)
from taskgrouper.routing import ProbMatrix
from taskgrouper.tensor import ShapeMismatchError, Tensor, grad_check

CHARSET = (START_CODE, 1, 2, 3, 4, 5)


def tiny_head(seed=0, charset=CHARSET, d=3, embed=4, hidden=5, head_id=0):
    return RecognitionHead(head_id, d, embed, hidden, charset, np.random.default_rng(seed))


def make_word(rng, length=3, d=3, codes=(1, 2, 3, 4, 5)):
    labels = np.array(codes)[rng.integers(0, len(codes), size=length)]
    return WordInstance(rng.normal(size=(length, d)), labels)


class TestWordInstance:
    def test_row_count_must_match_labels(self):
        with pytest.raises(ValueError):
            WordInstance(np.zeros((2, 3)), np.array([1, 2, 3]))

    def test_empty_sequence_rejected(self):
        with pytest.raises(ValueError):
            WordInstance(np.zeros((0, 3)), np.array([], dtype=np.int64))


class TestHeadForward:
    def test_output_shape(self):
        head = tiny_head()
        word = make_word(np.random.default_rng(1), length=3)
        logits = head_forward(head, word)
        assert logits.shape == (3, len(CHARSET))

    def test_determinism(self):
        head = tiny_head()
        word = make_word(np.random.default_rng(2))
        a = head_forward(head, word).data
        b = head_forward(head, word).data
        np.testing.assert_array_equal(a, b)

    def test_feature_dim_mismatch(self):
        head = tiny_head(d=3)
        word = WordInstance(np.zeros((2, 7)), np.array([1, 2]))
        with pytest.raises(ShapeMismatchError):
            head_forward(head, word)

    def test_gradient_wrt_all_parameters(self):
        # finite differences on every parameter, via a flattened wrapper
        head = tiny_head(seed=3)
        word = make_word(np.random.default_rng(4), length=2)
        for target in head.parameters():
            saved = target.data.copy()

            def fn(t):
                target.data = t.data.reshape(saved.shape)
                out = head.forward_word(word).sum()
                target.data = saved
                return out

            def fn_with_grad():
                loss = head.forward_word(word).sum()
                loss.backward()
                g = target.grad_array().copy()
                for p in head.parameters():
                    p.zero_grad()
                return g

            analytic = fn_with_grad().ravel()
            flat = saved.ravel().copy()
            numeric = np.zeros_like(flat)
            for i in range(flat.size):
                orig = flat[i]
                for sign, slot in ((1, 0), (-1, 1)):
                    flat[i] = orig + sign * 1e-5
                    target.data = flat.reshape(saved.shape)
                    val = head.forward_word(word).sum().item()
                    if slot == 0:
                        plus = val
                    else:
                        minus = val
                flat[i] = orig
                target.data = saved
                numeric[i] = (plus - minus) / 2e-5
            denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
            assert np.max(np.abs(analytic - numeric) / denom) < 1e-4, target.name

    def test_param_count_formula(self):
        c, d, e, h = len(CHARSET), 3, 4, 5
        expected = c * e + d * h + e * h + h + h * h + h + h * c + c
        assert tiny_head().param_count() == expected


class TestSeqLoss:
    def test_uniform_logits_give_log_c(self):
        head = tiny_head(charset=tuple(range(10)))
        logits = Tensor(np.zeros((4, 10)))
        loss = seq_loss(logits, [1, 2, 3, 4], head)
        np.testing.assert_allclose(loss.item(), np.log(10.0), atol=1e-12)

    def test_confident_correct_prediction_is_free(self):
        head = tiny_head()
        logits_data = np.full((2, len(CHARSET)), -1e3)
        logits_data[0, head.charset.index(1)] = 1e3
        logits_data[1, head.charset.index(2)] = 1e3
        loss = seq_loss(Tensor(logits_data), [1, 2], head)
        assert loss.item() < 1e-9

    def test_hand_built_two_position_example(self):
        head = tiny_head(charset=(0, 1, 2))
        logits = Tensor(np.array([[2.0, 0.0, 0.0], [0.0, 2.0, 0.0]]))
        loss = seq_loss(logits, [0, 1], head)
        # hand softmax: sigma = exp(2) / (exp(2) + 2) picks the true char both times
        sigma = np.exp(2.0) / (np.exp(2.0) + 2.0)
        np.testing.assert_allclose(loss.item(), -0.5 * (np.log(sigma) + np.log(sigma)), atol=1e-12)

    def test_unknown_label_names_head_and_code(self):
        head = tiny_head(head_id=7)
        with pytest.raises(UnsupportedCharacterError) as err:
            seq_loss(Tensor(np.zeros((1, len(CHARSET)))), [42], head)
        assert err.value.head_id == 7
        assert err.value.code == 42

    def test_charset_permutation_covariance(self):
        rng = np.random.default_rng(5)
        logits = rng.normal(size=(3, 6))
        labels = [1, 5, 3]
        base = seq_loss(Tensor(logits), labels, tiny_head()).item()
        perm = rng.permutation(6)
        permuted_charset = tuple(np.array(CHARSET)[perm])
        permuted = seq_loss(Tensor(logits[:, perm]), labels, tiny_head(charset=permuted_charset)).item()
        np.testing.assert_allclose(permuted, base, atol=1e-12)

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(6)
        head = tiny_head()
        labels = [2, 4, 1]

        def fn(t):
            return seq_loss(t, labels, head)

        assert grad_check(fn, Tensor(rng.normal(size=(3, len(CHARSET)))), step=1e-5) < 1e-4


class TestIntegratedLoss:
    def _matrix(self, rng, w, m):
        cols = [Tensor(rng.uniform(0.5, 3.0, size=(w, 1)), requires_grad=True) for _ in range(m)]
        return cols, stack_columns(cols)

    def test_one_hot_epsilon_zero_sums_assigned_losses(self):
        rng = np.random.default_rng(7)
        w, m = 5, 3
        cols, matrix = self._matrix(rng, w, m)
        assign = rng.integers(0, m, size=w)
        p = np.zeros((w, m))
        p[np.arange(w), assign] = 1.0
        loss = integrated_loss(matrix, ProbMatrix(Tensor(p), "word-model"), epsilon=0.0)
        expected = sum(cols[j].data[k, 0] for k, j in enumerate(assign))
        np.testing.assert_allclose(loss.item(), expected, atol=1e-12)

    def test_constant_losses_closed_form(self):
        # every loss c, rows sum to 1: total = c * w * (1 + eps * m)
        w, m, c, eps = 4, 3, 1.7, 0.2
        matrix = stack_columns([Tensor(np.full((w, 1), c)) for _ in range(m)])
        p = ProbMatrix(Tensor(np.full((w, m), 1 / m)), "word-model")
        loss = integrated_loss(matrix, p, epsilon=eps)
        np.testing.assert_allclose(loss.item(), c * w * (1 + eps * m), atol=1e-12)

    def test_epsilon_decomposition_identity(self):
        rng = np.random.default_rng(8)
        w, m, eps = 6, 4, 0.3
        _, matrix = self._matrix(rng, w, m)
        p = ProbMatrix(Tensor(rng.dirichlet(np.ones(m), size=w)), "word-model")
        with_eps = integrated_loss(matrix, p, epsilon=eps).item()
        base = integrated_loss(matrix, p, epsilon=0.0).item()
        total = matrix.data.sum()
        np.testing.assert_allclose(with_eps, base + eps * total, rtol=1e-9)

    def test_differentiable_through_probs_and_losses(self):
        rng = np.random.default_rng(9)
        cols, matrix = self._matrix(rng, 3, 2)
        p_raw = Tensor(rng.normal(size=(3, 2)), requires_grad=True)
        p = ProbMatrix(p_raw.softmax_rows(), "word-model")
        integrated_loss(matrix, p, epsilon=0.1).backward()
        assert p_raw.grad is not None
        assert all(c.grad is not None for c in cols)

    def test_every_head_gets_gradient_with_positive_epsilon(self):
        rng = np.random.default_rng(10)
        heads = [tiny_head(seed=s, head_id=s) for s in range(3)]
        batch = [make_word(rng) for _ in range(4)]
        cols = [h.word_losses(batch) for h in heads]
        # word-model rows fully concentrated on head 0
        p = np.zeros((4, 3))
        p[:, 0] = 1.0
        loss = integrated_loss(stack_columns(cols), ProbMatrix(Tensor(p), "word-model"), epsilon=0.2)
        loss.backward()
        for head in heads:
            norms = [np.linalg.norm(p.grad_array()) for p in head.parameters()]
            assert sum(norms) > 0, f"head {head.head_id} got no gradient"

    def test_shape_mismatch(self):
        matrix = stack_columns([Tensor(np.ones((3, 1)))])
        p = ProbMatrix(Tensor(np.ones((4, 1))), "word-model")
        with pytest.raises(ShapeMismatchError):
            integrated_loss(matrix, p, epsilon=0.0)

    def test_epsilon_seven_equals_six_plus_floor_on_gradients_too(self):
        # Eq-style check at the gradient level: d/dL of the eps term is constant
        rng = np.random.default_rng(11)
        cols, matrix = self._matrix(rng, 2, 2)
        p = ProbMatrix(Tensor(rng.dirichlet(np.ones(2), size=2)), "word-model")
        integrated_loss(matrix, p, epsilon=0.5).backward()
        for col in cols:
            assert np.all(col.grad >= 0.5 - 1e-12)


class TestPruneHead:
    def test_full_keep_is_identity(self):
        head = tiny_head(seed=12)
        pruned = prune_head(head, CHARSET)
        assert pruned.charset == head.charset
        assert pruned.param_count() == head.param_count()
        for name in RecognitionHead.PARAM_NAMES:
            np.testing.assert_array_equal(getattr(pruned, name).data, getattr(head, name).data)

    def test_output_rows_shrink(self):
        big = RecognitionHead(0, 4, 8, 16, tuple(range(500)), np.random.default_rng(13))
        pruned = prune_head(big, tuple(range(80)))
        assert pruned.w_out.shape == (16, 80)
        assert pruned.embed.shape == (80, 8)
        assert pruned.param_count() < big.param_count()

    def test_keep_must_be_subset(self):
        with pytest.raises(ValueError):
            prune_head(tiny_head(), (1, 2, 99))

    def test_keep_must_be_non_empty(self):
        with pytest.raises(ValueError):
            prune_head(tiny_head(), ())

    def test_argmax_and_probability_ratios_preserved(self):
        rng = np.random.default_rng(14)
        head = RecognitionHead(0, 3, 4, 6, tuple(range(12)), rng)
        keep = (0, 2, 3, 5, 7, 8)
        pruned = prune_head(head, keep)
        kept_cols = [head.charset.index(c) for c in keep]
        for _ in range(20):
            word = make_word(rng, length=4, codes=keep[1:])
            full = head.forward_word(word)
            restricted = np.exp(full.log_softmax_rows().data)[:, kept_cols]
            sub = pruned.forward_word(word)
            sub_probs = np.exp(sub.log_softmax_rows().data)
            # argmax among kept characters is unchanged
            np.testing.assert_array_equal(sub_probs.argmax(axis=1), restricted.argmax(axis=1))
            # and pairwise probability ratios are identical
            ratio = restricted / restricted.sum(axis=1, keepdims=True)
            np.testing.assert_allclose(sub_probs, ratio, atol=1e-9)
            # relative logit order among retained characters never changes
            np.testing.assert_array_equal(
                np.argsort(sub.data, axis=1), np.argsort(full.data[:, kept_cols], axis=1)
            )


def test_word_losses_match_per_word_seq_loss():
    rng = np.random.default_rng(15)
    head = tiny_head(seed=16)
    batch = [make_word(rng, length=int(rng.integers(1, 5))) for _ in range(6)]
    batched = head.word_losses(batch).data[:, 0]
    single = [seq_loss(head.forward_word(w), w.labels, head).item() for w in batch]
    np.testing.assert_allclose(batched, single, atol=1e-12)
