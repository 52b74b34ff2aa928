import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sqswin import autodiff as ad
from sqswin.errors import ContractError, NonFiniteError, ShapeError
from sqswin.gradcheck import check_gradients

from oracles import gelu_scalar, layer_norm_row, matmul_loops, softmax_row


def leaf(x):
    return ad.Tensor(x, requires_grad=True)


class TestMatmul:
    def test_two_by_two_against_loops(self):
        a, b = [[1, 2], [3, 4]], [[5, 6], [7, 8]]
        out = ad.matmul(ad.Tensor(a), ad.Tensor(b)).data
        np.testing.assert_array_equal(out, [[19, 22], [43, 50]])
        np.testing.assert_array_equal(out, matmul_loops(a, b))

    def test_random_batched_against_loops(self):
        rng = np.random.default_rng(1)
        a, b = rng.normal(size=(3, 4, 5)), rng.normal(size=(5, 2))
        with ad.precision(np.float64):
            out = ad.matmul(ad.Tensor(a), ad.Tensor(b)).data
        for i in range(3):
            np.testing.assert_allclose(out[i], matmul_loops(a[i].tolist(), b.tolist()), rtol=1e-12)

    def test_identity_and_zero(self):
        a = np.arange(9.0).reshape(3, 3)
        np.testing.assert_array_equal(ad.matmul(ad.Tensor(a), ad.Tensor(np.eye(3))).data, a)
        assert not ad.matmul(ad.Tensor(a), ad.Tensor(np.zeros((3, 3)))).data.any()

    def test_mismatch_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4, 2\)"):
            ad.matmul(ad.Tensor(np.ones((2, 3))), ad.Tensor(np.ones((4, 2))))


def test_hadamard_examples():
    np.testing.assert_array_equal(ad.hadamard(ad.Tensor([1, 2, 3]), ad.Tensor([4, 5, 6])).data, [4, 10, 18])
    x = ad.Tensor([2.0, -3.0])
    np.testing.assert_array_equal(ad.hadamard(x, x).data, [4, 9])
    np.testing.assert_array_equal(ad.hadamard(x, ad.Tensor(np.ones(2))).data, x.data)
    with pytest.raises(ShapeError):
        ad.hadamard(ad.Tensor([1.0, 2.0]), ad.Tensor([1.0, 2.0, 3.0]))


class TestSoftmax:
    def test_uniform(self):
        np.testing.assert_allclose(ad.softmax_lastdim(ad.Tensor([0.0, 0.0, 0.0])).data, [1 / 3] * 3, atol=1e-7)

    def test_no_overflow(self):
        out = ad.softmax_lastdim(ad.Tensor([1000.0, 0.0])).data
        assert np.isfinite(out).all()
        np.testing.assert_allclose(out, [1.0, 0.0], atol=1e-6)

    def test_log_weights(self):
        x = [math.log(1), math.log(2), math.log(3)]
        out = ad.softmax_lastdim(ad.Tensor(x)).data
        np.testing.assert_allclose(out, softmax_row(x), atol=1e-7)
        np.testing.assert_allclose(out, [1 / 6, 2 / 6, 3 / 6], atol=1e-7)

    def test_mask_blocks_positions(self):
        out = ad.softmax_lastdim(ad.Tensor([[1.0, 5.0, 2.0]]), mask=np.array([[False, True, False]])).data
        assert out[0, 1] == 0.0
        np.testing.assert_allclose(out[0, [0, 2]], softmax_row([1.0, 2.0]), atol=1e-7)

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(-50, 50), min_size=1, max_size=12))
    def test_rows_sum_to_one(self, xs):
        out = ad.softmax_lastdim(ad.Tensor(xs)).data
        assert (out >= 0).all()
        assert abs(out.sum() - 1.0) <= 1e-6


class TestLayerNorm:
    def test_constant_token(self):
        out = ad.layer_norm(ad.Tensor([5.0, 5.0, 5.0]), ad.Tensor(np.ones(3)), ad.Tensor(np.zeros(3)))
        np.testing.assert_array_equal(out.data, [0, 0, 0])

    def test_two_values(self):
        out = ad.layer_norm(ad.Tensor([1.0, 3.0]), ad.Tensor(np.ones(2)), ad.Tensor(np.zeros(2)), eps=0.0)
        np.testing.assert_allclose(out.data, [-1, 1], atol=1e-7)

    def test_zero_gain_gives_bias(self):
        rng = np.random.default_rng(0)
        bias = rng.normal(size=4)
        out = ad.layer_norm(ad.Tensor(rng.normal(size=(3, 4))), ad.Tensor(np.zeros(4)), ad.Tensor(bias))
        np.testing.assert_allclose(out.data, np.broadcast_to(bias, (3, 4)), rtol=1e-6)

    def test_random_rows_against_loops(self):
        rng = np.random.default_rng(2)
        x, g, b = rng.normal(size=(4, 6)), rng.normal(size=6), rng.normal(size=6)
        with ad.precision(np.float64):
            out = ad.layer_norm(ad.Tensor(x), ad.Tensor(g), ad.Tensor(b), 1e-5).data
        for row, got in zip(x, out):
            np.testing.assert_allclose(got, layer_norm_row(row, g, b, 1e-5), rtol=1e-10)

    def test_wrong_gain_shape(self):
        with pytest.raises(ShapeError):
            ad.layer_norm(ad.Tensor(np.ones((2, 3))), ad.Tensor(np.ones(2)), ad.Tensor(np.ones(3)))


def test_gelu_matches_scalar_formula():
    xs = np.linspace(-4, 4, 17)
    with ad.precision(np.float64):
        out = ad.gelu(ad.Tensor(xs)).data
    np.testing.assert_allclose(out, [gelu_scalar(x) for x in xs], rtol=1e-12, atol=1e-15)


class TestBackward:
    def test_sum(self):
        x = leaf([1.0, 2.0, 3.0])
        ad.backward(ad.sum(x))
        np.testing.assert_array_equal(x.grad, [1, 1, 1])

    def test_square(self):
        x = leaf([2.0, -3.0])
        ad.backward(ad.sum(ad.hadamard(x, x)))
        np.testing.assert_array_equal(x.grad, [4, -6])

    def test_accumulates_until_cleared(self):
        x = leaf([1.0, 2.0])
        ad.backward(ad.sum(x))
        ad.backward(ad.sum(x))
        np.testing.assert_array_equal(x.grad, [2, 2])
        x.zero_grad()
        ad.backward(ad.sum(x))
        np.testing.assert_array_equal(x.grad, [1, 1])

    def test_non_scalar_loss(self):
        with pytest.raises(ContractError):
            ad.backward(ad.scale(leaf([1.0, 2.0]), 2.0))

    def test_tape_is_topological(self):
        x, w = leaf(np.ones((2, 3))), leaf(np.ones((3, 2)))
        loss = ad.sum(ad.gelu(ad.matmul(x, w)))
        order = ad.tape(loss)
        seen = set()
        for node in order:
            for p in node._parents:
                assert p.is_leaf or id(p) in seen
            seen.add(id(node))
        assert order[-1] is loss


# Each entry builds a scalar loss from float64 leaves drawn by the rng.
def _matmul_graph(rng):
    a, b = leaf(rng.normal(size=(2, 3, 4))), leaf(rng.normal(size=(4, 5)))
    r = ad.Tensor(rng.normal(size=(2, 3, 5)))
    return lambda: ad.sum(ad.hadamard(ad.matmul(a, b), r)), {"a": a, "b": b}


def _norm_graph(rng):
    x, g, bias = leaf(rng.normal(size=(3, 4))), leaf(rng.normal(size=4)), leaf(rng.normal(size=4))
    r = ad.Tensor(rng.normal(size=(3, 4)))
    mask = np.zeros((3, 4), bool)
    mask[0, 1] = True

    def f():
        y = ad.softmax_lastdim(ad.gelu(ad.layer_norm(x, g, bias)), mask)
        return ad.sum(ad.hadamard(y, r))
    return f, {"x": x, "g": g, "b": bias}


def _shape_graph(rng):
    x, y = leaf(rng.normal(size=(2, 3))), leaf(rng.normal(size=(2, 2)))
    r = ad.Tensor(rng.normal(size=(5, 3)))

    def f():
        z = ad.concat([x, y], axis=-1)                                 # 2x5
        z = ad.permute(ad.roll(z, 1, 1), (1, 0))                       # 5x2
        z = ad.subtract(ad.matmul(z, ad.reshape(x, (2, 3))), ad.mean(x, axis=0))  # 5x3
        z = ad.hadamard(z, r)
        return ad.add(ad.sum(ad.abs(ad.take(z, np.array([0, 2, 4])))), ad.sum(ad.relu(ad.sum(z, axis=0))))
    return f, {"x": x, "y": y}


GRAPHS = {"matmul": _matmul_graph, "norm": _norm_graph, "shapes": _shape_graph}


@pytest.mark.parametrize("name", sorted(GRAPHS))
def test_composite_graphs_match_finite_differences(name):
    rng = np.random.default_rng(7)
    with ad.precision(np.float64):
        fn, params = GRAPHS[name](rng)
        result = check_gradients(fn, params, n_samples=20)
    assert result.max_rel_error <= 1e-3, result.max_rel_error


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 64), st.integers(0, 2 ** 31 - 1))
def test_elementwise_ops_gradcheck(size, seed):
    rng = np.random.default_rng(seed)
    with ad.precision(np.float64):
        x = leaf(rng.uniform(0.2, 2.0, size) * rng.choice([-1, 1], size))
        w = ad.Tensor(rng.normal(size=size))
        fn = lambda: ad.sum(ad.hadamard(ad.add(ad.gelu(x), ad.abs(ad.scale(x, 0.5))), w))  # noqa: E731
        result = check_gradients(fn, {"x": x}, n_samples=min(size, 8), h=1e-4)
    assert result.max_rel_error <= 1e-3


def test_determinism():
    def run():
        rng = np.random.default_rng(3)
        a = ad.Tensor(rng.normal(size=(4, 4)))
        return ad.softmax_lastdim(ad.gelu(ad.matmul(a, a))).data
    assert run().tobytes() == run().tobytes()


def test_debug_mode_names_offending_op():
    with ad.debug_mode(), np.errstate(over="ignore"):
        with pytest.raises(NonFiniteError) as info:
            ad.matmul(ad.Tensor([[1e30]]), ad.Tensor([[1e30]]))
    assert info.value.op == "matmul"


def test_float32_default():
    assert ad.Tensor([1.0]).data.dtype == np.float32
    with ad.precision(np.float64):
        assert ad.Tensor([1.0]).data.dtype == np.float64
