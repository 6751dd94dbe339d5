"""Autodiff core: forward semantics, tape rules, and gradient correctness.

Every primitive op is checked against central finite differences; the checker
itself is validated on functions with known derivatives.
"""

import numpy as np
import numpy.testing as npt
import pytest

from stagnet import tensor as T
from stagnet.tensor import (
    GradError,
    ShapeError,
    Tensor,
    finite_difference_check,
    no_grad,
)


def rand(rng, *shape):
    return rng.uniform(-1.0, 1.0, shape)


class TestForwardBasics:
    def test_softmax_symmetry(self):
        out = T.softmax(Tensor([[0.0, 0.0]]))
        npt.assert_allclose(out.data, [[0.5, 0.5]], atol=1e-15)

    def test_matmul_identity(self):
        rng = np.random.default_rng(0)
        x = Tensor(rand(rng, 3, 5))
        out = T.matmul(Tensor(np.eye(3)), x)
        npt.assert_array_equal(out.data, x.data)

    def test_concat_axis0(self):
        out = T.concat([Tensor([1.0, 2.0]), Tensor([3.0])], axis=0)
        npt.assert_array_equal(out.data, [1.0, 2.0, 3.0])

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(ShapeError) as exc:
            T.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros((3, 2))))
        assert "(2, 3)" in str(exc.value) and "(3, 2)" in str(exc.value)

    def test_matmul_inner_dim_mismatch(self):
        with pytest.raises(ShapeError):
            T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 2))))

    def test_non_finite_input_rejected(self):
        with pytest.raises(ValueError):
            Tensor([1.0, np.inf])
        with pytest.raises(ValueError):
            Tensor([np.nan])

    def test_ops_stay_finite_on_finite_inputs(self):
        rng = np.random.default_rng(7)
        x = Tensor(rng.uniform(-50, 50, (4, 6)))
        for out in [
            T.softmax(x),
            T.log_softmax(x),
            T.sigmoid(x),
            T.tanh(x),
            T.log(T.exp(Tensor(rng.uniform(-2, 2, (4, 6))))),
            T.masked_fill(x, x.data > 0, T.NEG_FILL),
        ]:
            assert np.all(np.isfinite(out.data) | (out.data == T.NEG_FILL))


class TestBackwardBasics:
    def test_quadratic_gradient(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        loss = T.tsum(T.mul(x, x))
        loss.backward()
        npt.assert_allclose(x.grad, [2.0, 4.0], atol=1e-14)

    def test_constant_loss_is_noop(self):
        c = Tensor(3.0)
        c.backward()
        assert c.grad is None

    def test_non_scalar_backward_rejected(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        y = T.mul(x, x)
        with pytest.raises(GradError):
            y.backward()

    def test_second_backward_rejected(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        loss = T.tsum(T.mul(x, x))
        loss.backward()
        with pytest.raises(GradError):
            loss.backward()

    def test_fresh_tape_after_backward(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        T.tsum(T.mul(x, x)).backward()
        x.zero_grad()
        T.tsum(x).backward()
        npt.assert_allclose(x.grad, [1.0, 1.0])

    def test_gradient_accumulates_across_uses(self):
        x = Tensor([0.5, -0.25, 2.0], requires_grad=True)
        loss = T.add(T.tsum(T.mul(x, x)), T.tsum(x))
        loss.backward()
        npt.assert_allclose(x.grad, 2.0 * x.data + 1.0, atol=1e-14)

    def test_no_grad_disables_recording(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with no_grad():
            y = T.tsum(T.mul(x, x))
        assert not y.requires_grad
        y.backward()
        assert x.grad is None

    def test_frozen_inputs_get_no_grad(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        c = Tensor([3.0, 4.0])
        T.tsum(T.mul(x, c)).backward()
        npt.assert_allclose(x.grad, c.data)
        assert c.grad is None


class TestSoftmaxProperties:
    def test_rows_sum_to_one(self):
        rng = np.random.default_rng(11)
        for _ in range(20):
            x = Tensor(rng.normal(0, 5, (6, 9)))
            s = T.softmax(x).data
            npt.assert_allclose(s.sum(axis=-1), np.ones(6), atol=1e-12)

    def test_shift_invariance(self):
        rng = np.random.default_rng(12)
        for _ in range(20):
            raw = rng.normal(0, 3, (4, 7))
            c = rng.normal(0, 10)
            a = T.softmax(Tensor(raw)).data
            b = T.softmax(Tensor(raw + c)).data
            npt.assert_allclose(a, b, atol=1e-12)


def check(fn, theta_data, seeds=5, tol=1e-4, step=1e-5):
    """Finite-difference check a scalar function of one tensor over several seeds."""
    worst = 0.0
    for seed in range(seeds):
        rng = np.random.default_rng(1000 + seed)
        theta = Tensor(theta_data(rng), requires_grad=True)
        worst = max(worst, finite_difference_check(fn(rng), theta, step=step))
    assert worst <= tol, f"finite-difference error {worst:.3e}"


class TestFiniteDifferencePerOp:
    """Each primitive op, composed to a scalar with constant weights."""

    def test_checker_exact_on_quadratic(self):
        theta = Tensor([1.0], requires_grad=True)
        err = finite_difference_check(lambda t: T.tsum(T.mul(t, t)), theta)
        assert err <= 1e-7

    def test_checker_reports_probe_failures(self):
        def bad(t):
            if abs(float(t.data[0]) - 1.0) > 1e-9:
                raise ValueError("boom")
            return T.tsum(t)

        theta = Tensor([1.0], requires_grad=True)
        with pytest.raises(Exception):
            finite_difference_check(bad, theta)

    def test_add_sub_mul_neg_scale(self):
        def fn(rng):
            other = Tensor(rand(rng, 3, 4))
            w = Tensor(rand(rng, 3, 4))
            return lambda t: T.tsum(
                T.mul(w, T.scale(T.neg(T.add(T.sub(t, other), T.mul(t, other))), 1.7))
            )

        check(fn, lambda rng: rand(rng, 3, 4))

    def test_add_last(self):
        def fn(rng):
            x = Tensor(rand(rng, 4, 3))
            w = Tensor(rand(rng, 4, 3))
            return lambda t: T.tsum(T.mul(w, T.add_last(x, t)))

        check(fn, lambda rng: rand(rng, 3))

    def test_matmul_2d(self):
        def fn(rng):
            b = Tensor(rand(rng, 4, 2))
            w = Tensor(rand(rng, 3, 2))
            return lambda t: T.tsum(T.mul(w, T.matmul(t, b)))

        check(fn, lambda rng: rand(rng, 3, 4))

    def test_matmul_stacked_times_2d(self):
        def fn(rng):
            w = Tensor(rand(rng, 2, 3, 2))
            x = Tensor(rand(rng, 2, 3, 4))
            return lambda t: T.tsum(T.mul(w, T.matmul(x, t)))

        check(fn, lambda rng: rand(rng, 4, 2))

    def test_matmul_batched(self):
        def fn(rng):
            b = Tensor(rand(rng, 2, 4, 2))
            w = Tensor(rand(rng, 2, 3, 2))
            return lambda t: T.tsum(T.mul(w, T.matmul(t, b)))

        check(fn, lambda rng: rand(rng, 2, 3, 4))

    def test_transpose(self):
        def fn(rng):
            w = Tensor(rand(rng, 4, 3))
            return lambda t: T.tsum(T.mul(w, T.transpose(t)))

        check(fn, lambda rng: rand(rng, 3, 4))

    def test_dot_last(self):
        def fn(rng):
            x = Tensor(rand(rng, 2, 5, 3))
            w = Tensor(rand(rng, 2, 5))
            return lambda t: T.tsum(T.mul(w, T.dot_last(x, t)))

        check(fn, lambda rng: rand(rng, 3))

    def test_dot_last_grad_wrt_stack(self):
        def fn(rng):
            v = Tensor(rand(rng, 3))
            w = Tensor(rand(rng, 2, 5))
            return lambda t: T.tsum(T.mul(w, T.dot_last(t, v)))

        check(fn, lambda rng: rand(rng, 2, 5, 3))

    def test_pair_sum(self):
        def fn(rng):
            other = Tensor(rand(rng, 2, 4, 3))
            w = Tensor(rand(rng, 2, 5, 4, 3))
            return lambda t: T.tsum(T.mul(w, T.pair_sum(t, other)))

        check(fn, lambda rng: rand(rng, 2, 5, 3))

    def test_concat_reshape_narrow(self):
        def fn(rng):
            other = Tensor(rand(rng, 2, 4))
            w = Tensor(rand(rng, 8))
            return lambda t: T.tsum(
                T.mul(w, T.reshape(T.narrow(T.concat([t, other], axis=0), 0, 1, 2), (8,)))
            )

        check(fn, lambda rng: rand(rng, 2, 4))

    def test_reductions(self):
        def fn(rng):
            w = Tensor(rand(rng, 4))
            return lambda t: T.add(
                T.tsum(T.mul(w, T.tmean(t, axis=0))),
                T.scale(T.tmean(T.tsum(t, axis=1)), 0.3),
            )

        check(fn, lambda rng: rand(rng, 3, 4))

    def test_amax(self):
        def fn(rng):
            w = Tensor(rand(rng, 4))
            return lambda t: T.tsum(T.mul(w, T.amax(t, axis=0)))

        # well-separated values so +-step never flips the argmax
        def data(rng):
            vals = rng.permutation(12).reshape(3, 4) * 0.1
            return vals + rng.uniform(0, 0.01, (3, 4))

        check(fn, data)

    def test_softmax_and_log_softmax(self):
        def fn_s(rng):
            w = Tensor(rand(rng, 3, 4))
            return lambda t: T.tsum(T.mul(w, T.softmax(t)))

        def fn_ls(rng):
            w = Tensor(rand(rng, 3, 4))
            return lambda t: T.tsum(T.mul(w, T.log_softmax(t)))

        check(fn_s, lambda rng: rand(rng, 3, 4) * 3)
        check(fn_ls, lambda rng: rand(rng, 3, 4) * 3)

    def test_scalar_nonlinearities(self):
        def away_from_zero(rng):
            return rng.uniform(0.05, 1.0, (3, 4)) * rng.choice([-1.0, 1.0], (3, 4))

        for op in [
            lambda t: T.leaky_relu(t, 0.2),
            T.relu,
            T.sigmoid,
            T.tanh,
            T.exp,
        ]:
            def fn(rng, op=op):
                w = Tensor(rand(rng, 3, 4))
                return lambda t: T.tsum(T.mul(w, op(t)))

            check(fn, away_from_zero)

    def test_log_positive_inputs(self):
        def fn(rng):
            w = Tensor(rand(rng, 3, 4))
            return lambda t: T.tsum(T.mul(w, T.log(t)))

        check(fn, lambda rng: rng.uniform(0.5, 2.0, (3, 4)))

    def test_masked_fill(self):
        mask = np.array([[True, False, False, True], [False, True, False, False]])

        def fn(rng):
            w = Tensor(rand(rng, 2, 4))
            return lambda t: T.tsum(T.mul(w, T.masked_fill(t, mask, -3.0)))

        check(fn, lambda rng: rand(rng, 2, 4))

    def test_fd_example_cross_entropy_shape(self):
        # mean negative log-likelihood on random logits
        target = np.array([0, 1, 1, 0])
        onehot = np.eye(2)[target]

        def fn(rng):
            w = Tensor(onehot)
            return lambda t: T.scale(T.neg(T.tsum(T.mul(w, T.log_softmax(t)))), 0.25)

        check(fn, lambda rng: rand(rng, 4, 2) * 2, seeds=10)


class TestDeterminism:
    def _run(self):
        rng = np.random.default_rng(99)
        x = Tensor(rng.normal(0, 1, (4, 4)), requires_grad=True)
        w = Tensor(rng.normal(0, 1, (4, 4)))
        loss = T.tsum(T.softmax(T.matmul(x, w)))
        loss.backward()
        return loss.data.copy(), x.grad.copy()

    def test_bit_identical_forward_and_grad(self):
        l1, g1 = self._run()
        l2, g2 = self._run()
        assert np.array_equal(l1, l2)
        assert np.array_equal(g1, g2)
