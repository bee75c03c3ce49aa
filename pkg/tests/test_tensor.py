"""Autodiff core: kernel values, backward passes, grad_check, optimizers."""

import numpy as np
import pytest

from taskgrouper.tensor import DomainError, ShapeMismatchError, Tensor, grad_check
from taskgrouper.optim import SGD, Adam, NaNGradientError


def test_row_softmax_symmetry():
    out = Tensor([[0.0, 0.0, 0.0]]).softmax_rows()
    np.testing.assert_allclose(out.data, [[1 / 3, 1 / 3, 1 / 3]])


def test_matmul_identity():
    rng = np.random.default_rng(0)
    a = rng.normal(size=(3, 5))
    out = Tensor(np.eye(3)) @ Tensor(a)
    np.testing.assert_allclose(out.data, a)


def test_log_softmax_matches_log_of_softmax():
    x = Tensor([[1.0, 2.0, 3.0]])
    direct = x.log_softmax_rows().data
    via_log = np.log(x.softmax_rows().data)
    np.testing.assert_allclose(direct, via_log, atol=1e-12)


def test_row_softmax_rows_are_stochastic():
    rng = np.random.default_rng(1)
    x = Tensor(rng.normal(scale=10.0, size=(20, 7)))
    out = x.softmax_rows().data
    np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-9)
    assert out.min() >= 0.0


def test_softmax_overflow_safe():
    out = Tensor([[1000.0, 1000.0, -1000.0]]).softmax_rows()
    assert np.all(np.isfinite(out.data))
    np.testing.assert_allclose(out.data[0, :2], 0.5, atol=1e-9)


def test_log_domain_error():
    with pytest.raises(DomainError):
        Tensor([[1.0, 0.0]]).log()


def test_shape_mismatch_names_kernel_and_shapes():
    with pytest.raises(ShapeMismatchError) as err:
        Tensor(np.zeros((2, 3))) @ Tensor(np.zeros((2, 3)))
    assert "matmul" in str(err.value)
    assert "(2, 3)" in str(err.value)


def test_backward_sum_gives_ones():
    x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
    x.sum().backward()
    np.testing.assert_allclose(x.grad, np.ones((2, 3)))


def test_backward_mean_gives_inverse_size():
    x = Tensor(np.zeros(4), requires_grad=True)
    x.mean().backward()
    np.testing.assert_allclose(x.grad, np.full(4, 0.25))


def test_backward_requires_scalar():
    x = Tensor(np.zeros((2, 2)), requires_grad=True)
    with pytest.raises(ValueError):
        (x * 2.0).backward()


def test_non_participating_leaf_gets_zero():
    x = Tensor(np.ones(3), requires_grad=True)
    y = Tensor(np.ones(3), requires_grad=True)
    _ = x * y  # y enters a graph, but not the loss below
    x.sum().backward()
    np.testing.assert_allclose(x.grad, np.ones(3))
    np.testing.assert_allclose(y.grad_array(), np.zeros(3))


def test_reused_leaf_accumulates():
    # f(x) = sum(x*x + 3x); df/dx = 2x + 3, verified against finite differences
    def fn(t):
        return (t * t + t.scale(3.0)).sum()

    x = Tensor(np.array([1.5, -2.0, 0.5]), requires_grad=True)
    fn(x).backward()
    np.testing.assert_allclose(x.grad, 2 * x.data + 3)
    assert grad_check(fn, x) < 1e-6


def test_nll_gradient_matches_finite_differences():
    rng = np.random.default_rng(7)
    labels = rng.integers(0, 5, size=1)

    def fn(logits):
        return logits.log_softmax_rows().take_per_row(labels).mean().scale(-1.0)

    point = Tensor(rng.normal(size=(1, 5)))
    assert grad_check(fn, point, step=1e-5) < 1e-4


def test_grad_check_on_square():
    err = grad_check(lambda t: (t * t).sum(), Tensor(np.array(3.0).reshape(1)), step=1e-5)
    assert err < 1e-6


KERNEL_FNS = {
    "add": lambda t: (t + Tensor(np.linspace(0.1, 1.0, t.size).reshape(t.shape))).sum(),
    "add_bias": lambda t: (Tensor(np.ones((4, t.size))) + t).sum(),
    "multiply": lambda t: (t * Tensor(np.linspace(-1.0, 1.3, t.size).reshape(t.shape))).sum(),
    "scale": lambda t: t.scale(-2.5).sum(),
    "matmul": lambda t: (t @ Tensor(np.linspace(-1, 1, t.shape[1] * 3).reshape(t.shape[1], 3))).sum(),
    "relu": lambda t: t.relu().sum(),
    "exp": lambda t: t.exp().sum(),
    "log": lambda t: t.log().sum(),
    "sum": lambda t: t.sum(),
    "mean": lambda t: t.mean(),
    "max": lambda t: t.max(),
    "softmax_rows": lambda t: (t.softmax_rows() * Tensor(np.linspace(0, 1, t.size).reshape(t.shape))).sum(),
    "log_softmax_rows": lambda t: (t.log_softmax_rows() * Tensor(np.linspace(0, 1, t.size).reshape(t.shape))).sum(),
    "gather_rows": lambda t: t.gather_rows(np.array([0, 2, 2, 1])).sum(),
    "take_per_row": lambda t: t.take_per_row(np.array([1, 0, 2])).sum(),
}


@pytest.mark.parametrize("kernel", sorted(KERNEL_FNS))
def test_kernel_gradients_at_random_points(kernel):
    rng = np.random.default_rng(hash(kernel) % 2**32)
    fn = KERNEL_FNS[kernel]
    for _ in range(10):
        x = rng.normal(size=(3, 4))
        if kernel == "log":
            x = np.abs(x) + 0.5
        if kernel == "max":
            # keep a unique, well-separated maximum so the point is smooth
            x = x + np.linspace(0, 10, 12).reshape(3, 4)
        if kernel == "add_bias":
            point = Tensor(x[0])
        else:
            point = Tensor(x)
        assert grad_check(fn, point, step=1e-6 if kernel == "max" else 1e-5) < 1e-4


def test_determinism_of_forward_and_backward():
    rng = np.random.default_rng(3)
    x_data = rng.normal(size=(5, 4))

    def run():
        x = Tensor(x_data.copy(), requires_grad=True)
        loss = ((x @ Tensor(np.ones((4, 2)))).relu().softmax_rows()
                * Tensor(np.ones((5, 2)))).sum()
        loss.backward()
        return loss.item(), x.grad.copy()

    v1, g1 = run()
    v2, g2 = run()
    assert v1 == v2
    np.testing.assert_array_equal(g1, g2)


class TestOptimizers:
    def test_sgd_basic_step(self):
        p = Tensor(np.array(0.0), requires_grad=True, name="p")
        p.grad = np.array(1.0)
        SGD([p], lr=0.1).step()
        np.testing.assert_allclose(p.data, -0.1)

    def test_sgd_zero_gradient_keeps_param(self):
        p = Tensor(np.array(1.5), requires_grad=True)
        p.grad = np.array(0.0)
        SGD([p], lr=0.1).step()
        np.testing.assert_allclose(p.data, 1.5)

    def test_adam_first_step_matches_hand_recurrence(self):
        lr, b1, b2, eps = 1e-3, 0.9, 0.999, 1e-8
        for g in (0.01, 1.0, 100.0, 1e3):
            p = Tensor(np.array(5.0), requires_grad=True)
            p.grad = np.array(g)
            Adam([p], lr=lr).step()
            # hand evaluation of the recurrence at t=1
            m = (1 - b1) * g / (1 - b1)
            v = (1 - b2) * g * g / (1 - b2)
            expected = 5.0 - lr * m / (np.sqrt(v) + eps)
            np.testing.assert_allclose(p.data, expected, rtol=0, atol=1e-15)
            # bias correction makes the first update's magnitude the lr itself
            assert abs(abs(float(p.data) - 5.0) - lr) < 1e-9

    def test_adam_reduces_quadratic(self):
        p = Tensor(np.array([4.0, -3.0]), requires_grad=True)
        opt = Adam([p], lr=0.05)
        for _ in range(400):
            loss = (p * p).sum()
            opt.zero_grad()
            loss.backward()
            opt.step()
        assert np.abs(p.data).max() < 0.05

    def test_nan_gradient_identifies_parameter(self):
        p = Tensor(np.array(1.0), requires_grad=True, name="bad_param")
        p.grad = np.array(np.nan)
        with pytest.raises(NaNGradientError, match="bad_param"):
            SGD([p], lr=0.1).step()

    def test_unreached_param_is_skipped(self):
        p = Tensor(np.array(2.0), requires_grad=True)
        opt = Adam([p], lr=0.1)
        opt.step()  # no grad populated
        np.testing.assert_allclose(p.data, 2.0)
