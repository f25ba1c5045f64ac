import threading

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from finepim import tensor as T
from finepim.tensor import Tensor

from conftest import check_grads, max_rel_error, numeric_grad


def leaf(rng, *shape, scale=1.0):
    return Tensor(rng.normal(0, scale, shape), requires_grad=True)


class TestElementwise:
    def test_relu_values(self):
        np.testing.assert_array_equal(T.relu(Tensor([-1.0, 0.0, 2.0])).data, [0, 0, 2])

    def test_sign_zero_is_zero(self):
        np.testing.assert_array_equal(T.sign(Tensor([-3.5, 0.0, 0.1])).data, [-1, 0, 1])

    def test_mul_values(self):
        np.testing.assert_array_equal(T.mul(Tensor([2.0, 3.0]), Tensor([4.0, 5.0])).data, [8, 15])

    def test_scalar_broadcast(self):
        out = T.add(Tensor(np.ones((2, 3))), Tensor(2.0))
        assert out.shape == (2, 3)
        np.testing.assert_array_equal(out.data, 3.0)

    def test_shape_mismatch_reports_both_shapes(self):
        with pytest.raises(ValueError, match=r"\(2, 3\).*\(3, 2\)"):
            T.add(Tensor(np.ones((2, 3))), Tensor(np.ones((3, 2))))

    def test_row_broadcast_needs_explicit_call(self):
        with pytest.raises(ValueError):
            T.mul(Tensor(np.ones((2, 3))), Tensor(np.ones(3)))

    def test_sign_has_zero_gradient(self, rng):
        x = leaf(rng, 4)
        T.backward(T.sum(T.mul(T.sign(x), x)))
        np.testing.assert_array_equal(x.grad, np.sign(x.data))

    @pytest.mark.parametrize("op", ["add", "sub", "mul"])
    def test_binary_gradients(self, rng, op):
        fn = getattr(T, op)
        a, b = leaf(rng, 3, 4), leaf(rng, 3, 4)
        w = rng.normal(size=(3, 4))
        assert check_grads(lambda a, b: T.sum(T.mul(fn(a, b), Tensor(w))), [a, b]) < 1e-4

    @pytest.mark.parametrize("op", ["relu", "exp", "neg"])
    def test_unary_gradients(self, rng, op):
        fn = getattr(T, op)
        x = leaf(rng, 5)
        w = rng.normal(size=5)
        assert check_grads(lambda x: T.sum(T.mul(fn(x), Tensor(w))), [x]) < 1e-4

    def test_log_gradient(self, rng):
        x = Tensor(rng.uniform(0.5, 2.0, 6), requires_grad=True)
        assert check_grads(lambda x: T.sum(T.log(x)), [x]) < 1e-4

    def test_scale_gradient(self, rng):
        x = leaf(rng, 2, 2)
        T.backward(T.sum(T.scale(x, -2.5)))
        np.testing.assert_array_equal(x.grad, -2.5)


class TestMatmul:
    def test_identity(self):
        out = T.matmul(Tensor(np.eye(2)), Tensor([[5.0, 6.0], [7.0, 8.0]]))
        np.testing.assert_array_equal(out.data, [[5, 6], [7, 8]])

    def test_hand_case(self):
        out = T.matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[5.0], [6.0]]))
        np.testing.assert_array_equal(out.data, [[17], [39]])

    def test_inner_mismatch(self):
        with pytest.raises(ValueError):
            T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))

    def test_sum_gradient_matches_fd(self, rng):
        a, b = leaf(rng, 3, 3), leaf(rng, 3, 3)
        assert check_grads(lambda a, b: T.sum(T.matmul(a, b)), [a, b]) < 1e-4

    def test_batched(self, rng):
        a, b = leaf(rng, 2, 3, 4), leaf(rng, 2, 4, 5)
        np.testing.assert_allclose(T.matmul(a, b).data, a.data @ b.data)
        w = rng.normal(size=(2, 3, 5))
        assert check_grads(lambda a, b: T.sum(T.mul(T.matmul(a, b), Tensor(w))), [a, b]) < 1e-4


class TestSoftmax:
    def test_uniform(self):
        np.testing.assert_allclose(T.softmax(Tensor(np.zeros(4))).data, 0.25, atol=1e-15)

    def test_hand_case(self):
        out = T.softmax(Tensor([np.log(2), 0.0, 0.0])).data
        np.testing.assert_allclose(out, [0.5, 0.25, 0.25], atol=1e-15)

    def test_shift_invariance(self, rng):
        x = rng.normal(size=(3, 5))
        np.testing.assert_allclose(T.softmax(Tensor(x), 1).data, T.softmax(Tensor(x + 123.4), 1).data, atol=1e-12)

    def test_large_logits_are_stable(self):
        out = T.softmax(Tensor([1000.0, 0.0])).data
        assert np.all(np.isfinite(out))
        np.testing.assert_allclose(out, [1.0, 0.0], atol=1e-300)

    def test_non_finite_rejected(self):
        with pytest.raises(ValueError):
            T.softmax(Tensor([np.inf, 0.0]))

    @given(hnp.arrays(np.float64, (3, 4), elements=st.floats(-50, 50)))
    def test_rows_sum_to_one(self, x):
        out = T.softmax(Tensor(x), axis=1).data
        assert np.all(out >= 0) and np.all(out <= 1)
        np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-9)

    @pytest.mark.parametrize("axis", [0, 1, -1])
    def test_gradients(self, rng, axis):
        x = leaf(rng, 3, 4)
        w = rng.normal(size=(3, 4))
        for fn in (T.softmax, T.log_softmax):
            assert check_grads(lambda x: T.sum(T.mul(fn(x, axis), Tensor(w))), [x]) < 1e-4

    def test_log_softmax_matches_log_of_softmax(self, rng):
        x = rng.normal(size=(2, 6))
        np.testing.assert_allclose(T.log_softmax(Tensor(x), 1).data, np.log(T.softmax(Tensor(x), 1).data), atol=1e-12)


class TestConv2d:
    def test_scalar_kernel_doubles(self, rng):
        x = rng.normal(size=(1, 1, 3, 3))
        out = T.conv2d(Tensor(x), Tensor(np.full((1, 1, 1, 1), 2.0)))
        np.testing.assert_array_equal(out.data, 2 * x)

    def test_ones_stride_two(self):
        out = T.conv2d(Tensor(np.ones((1, 1, 4, 4))), Tensor(np.ones((1, 1, 2, 2))), stride=2)
        np.testing.assert_array_equal(out.data, np.full((1, 1, 2, 2), 4.0))

    @pytest.mark.parametrize("h,k,s,p", [(5, 3, 1, 1), (6, 3, 2, 1), (7, 2, 2, 0), (4, 1, 1, 0), (5, 5, 1, 2)])
    def test_output_size(self, h, k, s, p):
        out = T.conv2d(Tensor(np.zeros((2, 1, h, h))), Tensor(np.zeros((3, 1, k, k))), stride=s, padding=p)
        assert out.shape == (2, 3, (h + 2 * p - k) // s + 1, (h + 2 * p - k) // s + 1)

    def test_matches_direct_loops(self, rng):
        x, w = rng.normal(size=(2, 3, 6, 5)), rng.normal(size=(4, 3, 3, 3))
        out = T.conv2d(Tensor(x), Tensor(w), stride=2, padding=1).data
        xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
        ref = np.zeros_like(out)
        for n in range(2):
            for o in range(4):
                for i in range(out.shape[2]):
                    for j in range(out.shape[3]):
                        ref[n, o, i, j] = np.sum(xp[n, :, 2 * i:2 * i + 3, 2 * j:2 * j + 3] * w[o])
        np.testing.assert_allclose(out, ref, atol=1e-12)

    def test_kernel_too_large(self):
        with pytest.raises(ValueError):
            T.conv2d(Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.zeros((1, 1, 3, 3))))

    def test_channel_mismatch(self):
        with pytest.raises(ValueError):
            T.conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 3, 1, 1))))

    def test_kernel_gradient(self, rng):
        x, w = leaf(rng, 1, 2, 5, 5), leaf(rng, 3, 2, 3, 3)
        g = rng.normal(size=(1, 3, 3, 3))
        assert check_grads(lambda x, w: T.sum(T.mul(T.conv2d(x, w, 2, 1), Tensor(g))), [x, w]) < 1e-4


class TestReductions:
    def test_argsort_desc(self):
        np.testing.assert_array_equal(T.argsort_desc([0.1, 0.9, 0.5]), [1, 2, 0])

    def test_argsort_ties_stable(self):
        np.testing.assert_array_equal(T.argsort_desc([0.5, 0.7, 0.5, 0.7]), [1, 3, 0, 2])

    def test_topk(self):
        assert set(T.topk(np.array([0.1, 0.9, 0.5]), 2).tolist()) == {1, 2}

    def test_topk_too_large(self):
        with pytest.raises(ValueError):
            T.topk(np.arange(3.0), 4)

    @given(hnp.arrays(np.float64, st.integers(1, 30), elements=st.sampled_from([0.0, 0.25, 0.5, 1.0])))
    def test_argsort_is_permutation_and_sorted(self, x):
        idx = T.argsort_desc(x)
        assert sorted(idx.tolist()) == list(range(len(x)))
        assert np.all(np.diff(x[idx]) <= 0)

    def test_mean_of_constant(self):
        np.testing.assert_array_equal(T.mean(Tensor(np.full((3, 4), 2.5)), axis=1).data, 2.5)

    @pytest.mark.parametrize("axis", [None, 0, 1, (0, 2)])
    def test_sum_mean_gradients(self, rng, axis):
        x = leaf(rng, 2, 3, 4)
        for fn in (T.sum, T.mean):
            out_shape = fn(x, axis).shape
            w = Tensor(rng.normal(size=out_shape))
            assert check_grads(lambda x: T.sum(T.mul(fn(x, axis), w)), [x]) < 1e-4

    def test_amax_gradient_goes_to_first_max(self):
        x = Tensor([[1.0, 3.0, 3.0], [2.0, 0.0, 1.0]], requires_grad=True)
        T.backward(T.sum(T.amax(x, axis=1)))
        np.testing.assert_array_equal(x.grad, [[0, 1, 0], [1, 0, 0]])

    def test_gather_values_and_gradient(self, rng):
        x = leaf(rng, 5, 3)
        idx = np.array([4, 0, 4])
        np.testing.assert_array_equal(T.gather(x, idx, 0).data, x.data[idx])
        T.backward(T.sum(T.gather(x, idx, 0)))
        np.testing.assert_array_equal(x.grad[:, 0], [1, 0, 0, 0, 2])

    def test_gather_out_of_bounds(self, rng):
        with pytest.raises(IndexError):
            T.gather(leaf(rng, 3), np.array([3]))

    def test_take_along_axis_gradient(self, rng):
        x = leaf(rng, 2, 6, 3)
        idx = np.array([[5, 1, 1], [0, 2, 4]])[:, :, None]
        w = Tensor(rng.normal(size=(2, 3, 3)))
        assert check_grads(lambda x: T.sum(T.mul(T.take_along_axis(x, idx, 1), w)), [x]) < 1e-4


class TestShapeOps:
    def test_reshape_transpose_broadcast_gradients(self, rng):
        x = leaf(rng, 2, 3)
        w = Tensor(rng.normal(size=(4, 3, 2)))
        build = lambda x: T.sum(T.mul(T.broadcast_to(T.transpose(x), (4, 3, 2)), w))  # noqa: E731
        assert check_grads(build, [x]) < 1e-4
        y = leaf(rng, 6)
        v = Tensor(rng.normal(size=(3, 2)))
        assert check_grads(lambda y: T.sum(T.mul(T.reshape(y, (3, 2)), v)), [y]) < 1e-4

    def test_concat_stack(self, rng):
        a, b = leaf(rng, 2, 3), leaf(rng, 2, 1)
        w = Tensor(rng.normal(size=(2, 4)))
        assert check_grads(lambda a, b: T.sum(T.mul(T.concat([a, b], axis=1), w)), [a, b]) < 1e-4
        c, d = leaf(rng, 2, 3), leaf(rng, 2, 3)
        v = Tensor(rng.normal(size=(2, 2, 3)))
        assert check_grads(lambda c, d: T.sum(T.mul(T.stack([c, d], axis=1), v)), [c, d]) < 1e-4

    def test_upsample_nearest(self, rng):
        x = Tensor(np.arange(4.0).reshape(1, 1, 2, 2))
        np.testing.assert_array_equal(T.upsample_nearest(x, 2).data[0, 0],
                                      [[0, 0, 1, 1], [0, 0, 1, 1], [2, 2, 3, 3], [2, 2, 3, 3]])
        y = leaf(rng, 1, 2, 2, 3)
        w = Tensor(rng.normal(size=(1, 2, 4, 6)))
        assert check_grads(lambda y: T.sum(T.mul(T.upsample_nearest(y, 2), w)), [y]) < 1e-4


class TestBackward:
    def test_sum_gives_ones(self, rng):
        x = leaf(rng, 2, 3, 4)
        T.backward(T.sum(x))
        np.testing.assert_array_equal(x.grad, 1.0)

    def test_quadratic(self):
        x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
        T.backward(T.sum(T.mul(x, x)))
        np.testing.assert_array_equal(x.grad, [2, 4, 6])

    def test_paths_accumulate(self):
        x = Tensor([1.5], requires_grad=True)
        y = T.add(T.mul(x, x), T.scale(x, 3.0))
        T.backward(T.sum(T.add(y, x)))
        np.testing.assert_allclose(x.grad, [2 * 1.5 + 3 + 1])

    def test_non_scalar_loss(self, rng):
        with pytest.raises(ValueError, match="scalar"):
            T.backward(T.relu(leaf(rng, 3)))

    def test_unconnected_loss(self):
        with pytest.raises(ValueError):
            T.backward(T.sum(Tensor(np.ones(3))))

    def test_each_op_replayed_once(self, rng):
        x = leaf(rng, 3)
        y = T.exp(x)
        z = T.sum(T.add(T.mul(y, y), y))
        tape = T.backward(z)
        assert len(tape.ops) == len({id(t) for t in tape.ops})
        seqs = [t._seq for t in tape.ops]
        assert seqs == sorted(seqs)

    def test_no_grad_records_nothing(self, rng):
        x = leaf(rng, 3)
        with T.no_grad():
            y = T.exp(x)
        assert not y.requires_grad and y._parents == ()

    def test_no_grad_is_thread_local(self, rng):
        x = leaf(rng, 3)
        seen = {}

        def worker():
            seen["other"] = T.exp(x).requires_grad

        with T.no_grad():
            t = threading.Thread(target=worker)
            t.start()
            t.join()
        assert seen["other"] is True

    def test_determinism(self, rng):
        data = rng.normal(size=(2, 3))

        def run():
            x = Tensor(data.copy(), requires_grad=True)
            T.backward(T.sum(T.softmax(T.matmul(x, T.transpose(x)), 1)))
            return x.grad

        assert run().tobytes() == run().tobytes()


OPS = ["add", "sub", "mul", "relu", "exp", "softlog", "matmul", "softmax", "log_softmax", "rowmean", "amax"]


def random_graph(seed: int, n_ops: int = 30):
    """Return (leaves, build) for a random DAG of ops over 4x4 tensors."""
    rng = np.random.default_rng(seed)
    leaves = [Tensor(rng.normal(0, 0.5, (4, 4)), requires_grad=True) for _ in range(3)]
    plan = [(OPS[rng.integers(len(OPS))], rng.integers(0, 10 ** 6, 2)) for _ in range(n_ops)]
    weights = rng.normal(size=(4, 4))

    def build(*xs):
        pool = list(xs)
        for op, (i, j) in plan:
            a, b = pool[i % len(pool)], pool[j % len(pool)]
            if op in ("add", "sub", "mul"):
                out = getattr(T, op)(a, b)
            elif op == "relu":
                out = T.relu(a)
            elif op == "exp":
                out = T.exp(T.scale(T.softmax(a, 1), 0.5))
            elif op == "softlog":
                out = T.log(T.add(T.mul(a, a), Tensor(1.0)))
            elif op == "matmul":
                out = T.scale(T.matmul(a, T.transpose(b)), 0.25)
            elif op in ("softmax", "log_softmax"):
                out = getattr(T, op)(a, int(i % 2))
            elif op == "rowmean":
                out = T.broadcast_to(T.mean(a, axis=1, keepdims=True), (4, 4))
            else:
                out = T.broadcast_to(T.amax(a, axis=0, keepdims=True), (4, 4))
            # keep magnitudes bounded so long chains stay well conditioned
            pool.append(T.scale(T.softmax(out, 1), 2.0) if np.abs(out.data).max() > 5 else out)
        return T.sum(T.mul(pool[-1], Tensor(weights)))

    return leaves, build


class TestComposedGraphs:
    @pytest.mark.parametrize("seed", range(20))
    def test_random_graph_gradients(self, seed):
        leaves, build = random_graph(seed)
        assert check_grads(build, leaves) < 1e-4


class TestFiniteDifferenceHelper:
    def test_numeric_grad_of_known_function(self):
        x = np.array([1.0, -2.0])
        g = numeric_grad(lambda: float(np.sum(x ** 3)), x)
        np.testing.assert_allclose(g, 3 * np.array([1.0, 4.0]), rtol=1e-8)

    def test_rel_error_ignores_tiny_entries(self):
        assert max_rel_error(np.array([1e-9, 1.0]), np.array([0.0, 1.0])) == 0.0


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10 ** 6))
def test_mean_equals_sum_over_count(seed):
    x = np.random.default_rng(seed).normal(size=(3, 5))
    np.testing.assert_allclose(T.mean(Tensor(x), 1).data, T.sum(Tensor(x), 1).data / 5, atol=1e-15)
