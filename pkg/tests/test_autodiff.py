import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from abds.autodiff import (
    GraphBuilder,
    GraphError,
    NonFiniteError,
    Tensor,
    finite_difference_check,
    forward_eval,
    vjp,
)


def identity_graph():
    gb = GraphBuilder()
    x = gb.leaf("x", (1,))
    return gb.build(x)


def sumsq_graph(n):
    gb = GraphBuilder()
    x = gb.leaf("x", (n,))
    return gb.build(gb.sumsq(x))


def mlp_graph(din=3, hidden=5):
    gb = GraphBuilder()
    x = gb.leaf("x", (2, din))
    w0 = gb.leaf("w0", (din, hidden))
    b0 = gb.leaf("b0", (hidden,))
    w1 = gb.leaf("w1", (hidden, din))
    h = gb.tanh(gb.add(gb.matmul(x, w0), b0))
    return gb.build(gb.sumsq(gb.matmul(h, w1)))


class TestTensor:
    def test_rejects_nan_and_inf(self):
        with pytest.raises(NonFiniteError):
            Tensor([1.0, float("nan")])
        with pytest.raises(NonFiniteError):
            Tensor([float("inf")])

    def test_immutable(self):
        t = Tensor([1.0, 2.0])
        with pytest.raises(AttributeError):
            t.shape = (3,)
        with pytest.raises(ValueError):
            t.data[0] = 5.0

    def test_shape_matches_data(self):
        t = Tensor([[1.0, 2.0], [3.0, 4.0]])
        assert t.shape == (2, 2)
        t.validate()


class TestForwardEval:
    def test_identity(self):
        assert forward_eval(identity_graph(), {"x": [2.0]}).data[0] == 2.0

    def test_sum_of_squares(self):
        out = forward_eval(sumsq_graph(2), {"x": [3.0, 4.0]})
        assert float(out.data) == 25.0

    def test_zero_weight_matmul(self):
        gb = GraphBuilder()
        x = gb.leaf("x", (1, 1))
        w = gb.leaf("w", (1, 1))
        g = gb.build(gb.matmul(x, w))
        for v in (-3.0, 0.0, 7.5):
            assert forward_eval(g, {"x": [[v]], "w": [[0.0]]}).data[0, 0] == 0.0

    def test_deterministic_bits(self):
        g = mlp_graph()
        rng = np.random.default_rng(0)
        bound = {
            "x": rng.normal(size=(2, 3)),
            "w0": rng.normal(size=(3, 5)),
            "b0": rng.normal(size=5),
            "w1": rng.normal(size=(5, 3)),
        }
        a = forward_eval(g, bound).data
        b = forward_eval(g, bound).data
        assert a.tobytes() == b.tobytes()

    def test_shape_mismatch_names_node(self):
        gb = GraphBuilder()
        a = gb.leaf("a", (2, 3))
        b = gb.leaf("b", (2, 3))
        with pytest.raises(GraphError, match="matmul node"):
            gb.matmul(a, b)

    def test_unbound_leaf(self):
        with pytest.raises(GraphError, match="not bound"):
            forward_eval(sumsq_graph(2), {})


class TestVjp:
    def test_linear_map(self):
        gb = GraphBuilder()
        x = gb.leaf("x", (1,))
        g = gb.build(gb.scale(x, 3.0))
        grads = vjp(g, {"x": [1.0]}, [1.0])
        assert grads["x"].data[0] == 3.0

    def test_square(self):
        grads = vjp(sumsq_graph(1), {"x": [2.0]}, 1.0)
        assert grads["x"].data[0] == 4.0

    def test_zero_cotangent(self):
        g = mlp_graph()
        rng = np.random.default_rng(1)
        bound = {
            "x": rng.normal(size=(2, 3)),
            "w0": rng.normal(size=(3, 5)),
            "b0": rng.normal(size=5),
            "w1": rng.normal(size=(5, 3)),
        }
        grads = vjp(g, bound, 0.0)
        assert all(np.all(t.data == 0.0) for t in grads.values())

    def test_cotangent_shape_error(self):
        with pytest.raises(GraphError, match="cotangent"):
            vjp(sumsq_graph(2), {"x": [1.0, 2.0]}, [1.0, 2.0])

    @settings(max_examples=25, derandomize=True, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_linear_in_cotangent(self, seed):
        gb = GraphBuilder()
        x = gb.leaf("x", (2, 2))
        w = gb.leaf("w", (2, 2))
        g = gb.build(gb.tanh(gb.matmul(x, w)))
        rng = np.random.default_rng(seed)
        bound = {"x": rng.uniform(-2, 2, (2, 2)), "w": rng.uniform(-2, 2, (2, 2))}
        c1 = rng.normal(size=(2, 2))
        c2 = rng.normal(size=(2, 2))
        g1 = vjp(g, bound, c1)["x"].data
        g2 = vjp(g, bound, c2)["x"].data
        g12 = vjp(g, bound, c1 + c2)["x"].data
        np.testing.assert_allclose(g12, g1 + g2, atol=1e-12)


class TestFiniteDifferences:
    def test_linear_graph_exact(self):
        gb = GraphBuilder()
        x = gb.leaf("x", (3,))
        g = gb.build(gb.scale(x, 2.5))
        assert finite_difference_check(g, {"x": [0.3, -1.0, 2.0]}, 1e-5) <= 1e-10

    def test_constant_gradient_zero(self):
        gb = GraphBuilder()
        x = gb.leaf("x", (2,))
        g = gb.build(gb.scale(x, 0.0))
        assert finite_difference_check(g, {"x": [1.0, 2.0]}, 1e-5) == 0.0

    def test_tanh_mlp(self):
        g = mlp_graph()
        rng = np.random.default_rng(2)
        bound = {
            "x": rng.uniform(-2, 2, (2, 3)),
            "w0": rng.uniform(-2, 2, (3, 5)),
            "b0": rng.uniform(-2, 2, 5),
            "w1": rng.uniform(-2, 2, (5, 3)),
        }
        assert finite_difference_check(g, bound, 1e-5) <= 1e-6

    @pytest.mark.parametrize("op", ["add", "scale", "matmul", "tanh", "relu", "sumsq", "concat"])
    def test_every_primitive(self, op):
        gb = GraphBuilder()
        rng = np.random.default_rng(hash(op) % 2**32)
        a = gb.leaf("a", (2, 3))
        if op == "add":
            node = gb.add(a, gb.leaf("b", (3,)))  # exercises the row broadcast
        elif op == "scale":
            node = gb.scale(a, -1.7)
        elif op == "matmul":
            node = gb.matmul(a, gb.leaf("b", (3, 2)))
        elif op == "tanh":
            node = gb.tanh(a)
        elif op == "relu":
            node = gb.relu(a)
        elif op == "sumsq":
            node = gb.sumsq(a)
        else:
            node = gb.concat(a, gb.leaf("b", (2, 2)))
        g = gb.build(node)
        bound = {
            name: rng.uniform(-2, 2, g.leaf_shape(name)) for name in g.leaves
        }
        # keep relu away from its kink where finite differences are one-sided
        if op == "relu":
            bound["a"] = np.where(np.abs(bound["a"]) < 0.2, 0.5, bound["a"])
        assert finite_difference_check(g, bound, 1e-5) <= 1e-6

    def test_rejects_bad_step(self):
        with pytest.raises(ValueError):
            finite_difference_check(identity_graph(), {"x": [1.0]}, 0.0)
