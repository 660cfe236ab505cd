"""Tensor op semantics, stability, and gradient correctness."""

import numpy as np
import pytest

from rowtab import tensor as T
from rowtab.tensor import NonFiniteError, ShapeError, Tape, Tensor, backward, set_debug_validation

from helpers import check_gradients, matmul_oracle


class TestMatmul:
    def test_identity(self):
        a = Tensor(np.eye(2))
        b = Tensor([[1.0, 2.0], [3.0, 4.0]])
        np.testing.assert_array_equal((a @ b).data, b.data)

    def test_row_times_column(self):
        out = Tensor([[1.0, 2.0]]) @ Tensor([[3.0], [4.0]])
        np.testing.assert_allclose(out.data, [[11.0]])

    def test_against_triple_loop_oracle(self):
        rng = np.random.default_rng(0)
        a = rng.standard_normal((3, 4))
        b = rng.standard_normal((4, 2))
        np.testing.assert_allclose((Tensor(a) @ Tensor(b)).data, matmul_oracle(a, b), rtol=1e-12)

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
            T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))

    def test_batched(self):
        rng = np.random.default_rng(1)
        a = rng.standard_normal((5, 3, 4))
        b = rng.standard_normal((4, 2))
        out = Tensor(a) @ Tensor(b)
        np.testing.assert_allclose(out.data, a @ b)


class TestSoftmax:
    def test_symmetry(self):
        np.testing.assert_allclose(T.softmax(Tensor([0.0, 0.0])).data, [0.5, 0.5])

    def test_known_ratio(self):
        np.testing.assert_allclose(T.softmax(Tensor([0.0, np.log(3.0)])).data, [0.25, 0.75], atol=1e-7)

    def test_no_overflow_at_large_inputs(self):
        out = T.softmax(Tensor([1000.0, 1000.0])).data
        np.testing.assert_allclose(out, [0.5, 0.5])
        assert np.isfinite(out).all()

    def test_sums_to_one_and_nonnegative(self):
        rng = np.random.default_rng(7)
        x = Tensor(rng.standard_normal((4, 9)))
        s = T.softmax(x, axis=-1).data
        assert (s >= 0).all()
        np.testing.assert_allclose(s.sum(axis=-1), 1.0, atol=1e-6)

    def test_shift_invariance(self):
        rng = np.random.default_rng(8)
        x = rng.standard_normal(6)
        a = T.softmax(Tensor(x)).data
        b = T.softmax(Tensor(x + 13.5)).data
        np.testing.assert_allclose(a, b, atol=1e-6)

    def test_bad_axis(self):
        with pytest.raises(ShapeError):
            T.softmax(Tensor([1.0, 2.0]), axis=3)


class TestLayerNorm:
    def test_already_normalized(self):
        out = T.layer_norm(Tensor([1.0, -1.0]), Tensor([1.0, 1.0]), Tensor([0.0, 0.0]))
        np.testing.assert_allclose(out.data, [1.0, -1.0], atol=1e-4)

    def test_constant_row_goes_to_zero(self):
        out = T.layer_norm(Tensor([5.0, 5.0, 5.0]), Tensor(np.ones(3)), Tensor(np.zeros(3)))
        np.testing.assert_allclose(out.data, [0.0, 0.0, 0.0])

    def test_gradient(self):
        rng = np.random.default_rng(2)
        x = rng.standard_normal((3, 5))
        g = rng.standard_normal(5) + 1.0
        b = rng.standard_normal(5)
        check_gradients(lambda xx, gg, bb: T.layer_norm(xx, gg, bb).sum(), [x, g, b])

    def test_wrong_affine_shape(self):
        with pytest.raises(ShapeError):
            T.layer_norm(Tensor(np.zeros((2, 4))), Tensor(np.ones(3)), Tensor(np.zeros(4)))


class TestLeakyRelu:
    def test_positive_passthrough(self):
        np.testing.assert_allclose(T.leaky_relu(Tensor([2.0])).data, [2.0])

    def test_negative_scaled_by_slope(self):
        np.testing.assert_allclose(T.leaky_relu(Tensor([-2.0]), slope=0.01).data, [-0.02])

    def test_zero_boundary(self):
        np.testing.assert_allclose(T.leaky_relu(Tensor([0.0])).data, [0.0])

    def test_negative_slope_rejected(self):
        with pytest.raises(ValueError):
            T.leaky_relu(Tensor([1.0]), slope=-0.1)


class TestCrossEntropy:
    def test_uniform_logits(self):
        loss = T.cross_entropy(Tensor([[0.0, 0.0]]), [0])
        assert abs(loss.item() - np.log(2.0)) < 1e-6

    def test_confident_correct(self):
        loss = T.cross_entropy(Tensor([[10.0, -10.0]]), [0])
        assert loss.item() < 1e-6

    def test_gradient_is_softmax_minus_onehot_over_batch(self):
        rng = np.random.default_rng(3)
        logits = rng.standard_normal((4, 3))
        labels = np.array([0, 2, 1, 1])
        with Tape():
            t = Tensor(logits.astype(np.float64), requires_grad=True)
            backward(T.cross_entropy(t, labels))
        z = logits - logits.max(axis=1, keepdims=True)
        p = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
        p[np.arange(4), labels] -= 1.0
        np.testing.assert_allclose(t.grad, p / 4.0, atol=1e-12)

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(4)
        logits = rng.standard_normal((3, 4))
        check_gradients(lambda x: T.cross_entropy(x, [1, 3, 0]), [logits])

    def test_out_of_range_label(self):
        with pytest.raises(ValueError, match="out of range"):
            T.cross_entropy(Tensor([[0.0, 0.0]]), [2])


class TestMse:
    def test_identical_inputs(self):
        a = Tensor([1.0, 2.0, 3.0])
        assert T.mse(a, Tensor([1.0, 2.0, 3.0])).item() == 0.0

    def test_half_of_squared_gap(self):
        assert T.mse(Tensor([0.0, 0.0]), Tensor([2.0, 0.0])).item() == pytest.approx(2.0)

    def test_hand_arithmetic(self):
        loss = T.mse(Tensor([1.0, 2.0, 3.0]), Tensor([2.0, 4.0, 6.0]))
        assert loss.item() == pytest.approx(14.0 / 3.0, rel=1e-6)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            T.mse(Tensor([1.0]), Tensor([1.0, 2.0]))


class TestBackward:
    def test_square_at_three(self):
        with Tape():
            x = Tensor([3.0], requires_grad=True)
            backward((x * x).sum())
        np.testing.assert_allclose(x.grad, [6.0])

    def test_sum_of_product(self):
        with Tape():
            x = Tensor([1.0, 2.0], requires_grad=True)
            y = Tensor([5.0, -3.0], requires_grad=True)
            backward((x * y).sum())
        np.testing.assert_array_equal(x.grad, y.data)
        np.testing.assert_array_equal(y.grad, x.data)

    def test_accumulation_equals_sum_of_single_uses(self):
        x0 = np.array([1.5, -0.5, 2.0], dtype=np.float64)

        def single(build):
            with Tape():
                x = Tensor(x0, requires_grad=True)
                backward(build(x))
            return x.grad

        g_twice = single(lambda x: (x * x).sum() + (3.0 * x).sum())
        g_a = single(lambda x: (x * x).sum())
        g_b = single(lambda x: (3.0 * x).sum())
        np.testing.assert_array_equal(g_twice, g_a + g_b)

    def test_non_scalar_loss_rejected(self):
        with Tape():
            x = Tensor([1.0, 2.0], requires_grad=True)
            y = x * x
            with pytest.raises(ShapeError):
                backward(y)

    def test_off_tape_loss_rejected(self):
        x = Tensor([1.0], requires_grad=True)
        y = (x * x).sum()  # no tape active: not recorded
        with pytest.raises(ValueError):
            backward(y)

    def test_no_tape_means_no_requires_grad(self):
        x = Tensor([1.0], requires_grad=True)
        assert not (x * x).requires_grad

    def test_detach_blocks_gradient(self):
        with Tape():
            x = Tensor([2.0], requires_grad=True)
            y = x * x
            backward((y.detach() * x).sum())
        np.testing.assert_allclose(x.grad, [4.0])  # only the direct use of x

    def test_independent_tapes_on_threads(self):
        import threading

        results = {}

        def work(key, scale):
            with Tape():
                x = Tensor([scale], requires_grad=True)
                backward((x * x).sum())
            results[key] = x.grad[0]

        threads = [threading.Thread(target=work, args=(i, float(i + 1))) for i in range(4)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        assert results == {i: pytest.approx(2.0 * (i + 1)) for i in range(4)}


class TestDebugValidation:
    def test_nan_detected_when_enabled(self):
        set_debug_validation(True)
        try:
            with np.errstate(invalid="ignore"), pytest.raises(NonFiniteError):
                T.log(Tensor([-1.0]))
        finally:
            set_debug_validation(False)

    def test_nan_ignored_when_disabled(self):
        with np.errstate(invalid="ignore"):
            out = T.log(Tensor([-1.0]))
        assert np.isnan(out.data).all()


OPS = {
    "add": (lambda a, b: (a + b).sum(), 2, [(3, 4), (3, 4)]),
    "add_broadcast": (lambda a, b: (a + b).sum(), 2, [(3, 4), (4,)]),
    "sub": (lambda a, b: (a - b).sum(), 2, [(2, 5), (2, 5)]),
    "mul": (lambda a, b: (a * b).sum(), 2, [(3, 3), (3, 3)]),
    "div": (lambda a, b: (a / (b * b + 1.0)).sum(), 2, [(4,), (4,)]),
    "pow": (lambda a: ((a * a + 1.0) ** 1.5).sum(), 1, [(5,)]),
    "exp": (lambda a: T.exp(a).sum(), 1, [(4,)]),
    "log": (lambda a: T.log(a * a + 1.0).sum(), 1, [(4,)]),
    "sqrt": (lambda a: T.sqrt(a * a + 1.0).sum(), 1, [(4,)]),
    "abs": (lambda a: T.absolute(a + 0.3).sum(), 1, [(6,)]),
    "matmul": (lambda a, b: (a @ b).sum(), 2, [(3, 4), (4, 2)]),
    "matmul_batched": (lambda a, b: (a @ b).sum(), 2, [(2, 3, 4), (2, 4, 3)]),
    "matmul_broadcast": (lambda a, b: (a @ b).sum(), 2, [(2, 3, 4), (4, 2)]),
    "transpose": (lambda a: (T.transpose(a, (1, 0)) @ a).sum(), 1, [(3, 4)]),
    "reshape": (lambda a: (a.reshape(6) * a.reshape(6)).sum(), 1, [(2, 3)]),
    "concat": (lambda a, b: (T.concat([a, b], axis=1) ** 2.0).sum(), 2, [(2, 3), (2, 2)]),
    "broadcast_to": (lambda a: (T.broadcast_to(a, (4, 3)) ** 2.0).sum(), 1, [(1, 3)]),
    "index_select": (lambda a: (T.index_select(a, [0, 2, 0]) ** 2.0).sum(), 1, [(3, 2)]),
    "getitem": (lambda a: (a[1:, :2] ** 2.0).sum(), 1, [(3, 3)]),
    "sum_axis": (lambda a: (a.sum(axis=1) ** 2.0).sum(), 1, [(3, 4)]),
    "mean_axis": (lambda a: (a.mean(axis=0) ** 2.0).sum(), 1, [(3, 4)]),
    "mean_all": (lambda a: a.mean() * 3.0, 1, [(3, 4)]),
    "reduce_max": (lambda a: T.reduce_max(a, axis=0).sum(), 1, [(5, 3)]),
    "reduce_min": (lambda a: T.reduce_min(a, axis=1).sum(), 1, [(4, 5)]),
    "leaky_relu": (lambda a: T.leaky_relu(a + 0.05, 0.01).sum(), 1, [(7,)]),
    "gelu": (lambda a: T.gelu(a).sum(), 1, [(6,)]),
    "softmax": (lambda a: (T.softmax(a, axis=-1) * T.softmax(a, axis=-1)).sum(), 1, [(3, 5)]),
    "layer_norm": (
        lambda a, g, b: T.layer_norm(a, g, b).sum(),
        3,
        [(3, 4), (4,), (4,)],
    ),
    "embedding": (lambda w: (T.embedding(w, np.array([[0, 2], [1, 1]])) ** 2.0).sum(), 1, [(4, 3)]),
    "mse": (lambda a, b: T.mse(a, b), 2, [(3, 3), (3, 3)]),
    "neg": (lambda a: (-a * a).sum(), 1, [(4,)]),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_op_gradient_matches_finite_differences(name):
    build, _, shapes = OPS[name]
    rng = np.random.default_rng(hash(name) % (2 ** 32))
    arrays = [rng.standard_normal(s) for s in shapes]
    check_gradients(build, arrays)


def test_embedding_range_check():
    w = Tensor(np.zeros((3, 2)))
    with pytest.raises(IndexError):
        T.embedding(w, np.array([3]))
    with pytest.raises(IndexError):
        T.embedding(w, np.array([-1]))


def test_dropout_inverted_scaling_and_eval_identity():
    rng = np.random.default_rng(11)
    x = Tensor(np.ones((1000,)))
    out = T.dropout(x, 0.25, rng)
    kept = out.data != 0
    assert abs(kept.mean() - 0.75) < 0.05
    np.testing.assert_allclose(out.data[kept], 1.0 / 0.75)
    same = T.dropout(x, 0.0, rng)
    assert same is x
