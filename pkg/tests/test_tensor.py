import numpy as np
import pytest

from conftest import central_difference, rel_error
from safl import tensor as T
from safl.tensor import RngStream, ShapeError, Tensor


def _check_unary(op, x0, **kw):
    x = Tensor(x0.copy(), requires_grad=True)
    w = np.random.default_rng(1).normal(size=op(Tensor(x0), **kw).shape)
    T.backward(T.sum_all(T.mul(op(x, **kw), Tensor(w))))

    def f():
        return float((op(Tensor(x.data), **kw).data * w).sum())

    assert rel_error(x.grad, central_difference(f, x.data)) < 1e-6


class TestGradients:
    rng = np.random.default_rng(0)

    @pytest.mark.parametrize(
        "op,kw",
        [
            (T.gelu, {}),
            (T.softmax_rows, {}),
            (T.reshape, {"shape": (6, 4)}),
            (T.transpose, {"axes": (1, 0, 2)}),
            (T.take_rows, {"index": 1, "axis": 1}),
            (lambda x: T.scale(x, -2.5), {}),
        ],
    )
    def test_unary_ops(self, op, kw):
        _check_unary(op, self.rng.normal(size=(2, 3, 4)), **kw)

    def test_softmax_with_mask(self):
        mask = np.zeros((3, 4))
        mask[:, -1] = -1e30
        _check_unary(lambda x: T.softmax_rows(x, mask), self.rng.normal(size=(2, 3, 4)))

    @pytest.mark.parametrize("sa,sb", [((3, 4), (4, 5)), ((2, 3, 4), (4, 5)), ((2, 3, 4), (2, 4, 5))])
    def test_matmul(self, sa, sb):
        a0, b0 = self.rng.normal(size=sa), self.rng.normal(size=sb)
        a, b = Tensor(a0.copy(), requires_grad=True), Tensor(b0.copy(), requires_grad=True)
        T.backward(T.sum_all(T.matmul(a, b)))
        fa = central_difference(lambda: float((a.data @ b0).sum()), a.data)
        fb = central_difference(lambda: float((a0 @ b.data).sum()), b.data)
        assert rel_error(a.grad, fa) < 1e-6 and rel_error(b.grad, fb) < 1e-6

    def test_broadcast_add_mul(self):
        a = Tensor(self.rng.normal(size=(3, 4)), requires_grad=True)
        b = Tensor(self.rng.normal(size=(4,)), requires_grad=True)
        T.backward(T.sum_all(T.mul(T.add(a, b), b)))
        np.testing.assert_allclose(b.grad, (a.data + 2 * b.data).sum(axis=0))
        np.testing.assert_allclose(a.grad, np.broadcast_to(b.data, (3, 4)))

    def test_layer_norm(self):
        x0 = self.rng.normal(size=(2, 3, 6))
        x = Tensor(x0.copy(), requires_grad=True)
        g = Tensor(self.rng.normal(size=6), requires_grad=True)
        b = Tensor(self.rng.normal(size=6), requires_grad=True)
        w = self.rng.normal(size=(2, 3, 6))
        T.backward(T.sum_all(T.mul(T.layer_norm(x, g, b), Tensor(w))))

        def f():
            return float((T.layer_norm(Tensor(x.data), Tensor(g.data), Tensor(b.data)).data * w).sum())

        for t in (x, g, b):
            assert rel_error(t.grad, central_difference(f, t.data)) < 1e-6

    def test_embedding_repeated_ids(self):
        table = Tensor(self.rng.normal(size=(5, 3)), requires_grad=True)
        ids = np.array([[0, 2, 2, 4]])
        T.backward(T.sum_all(T.embedding_lookup(table, ids)))
        np.testing.assert_array_equal(table.grad[:, 0], [1, 0, 2, 0, 1])

    def test_cross_entropy_weighted(self):
        logits = Tensor(self.rng.normal(size=(4, 3)), requires_grad=True)
        tgt, wts = np.array([0, 2, 1, 1]), np.array([1.0, 0.0, 2.0, 1.0])
        T.backward(T.cross_entropy_with_logits(logits, tgt, wts))
        fd = central_difference(lambda: T.cross_entropy_with_logits(Tensor(logits.data), tgt, wts).item(), logits.data)
        assert rel_error(logits.grad, fd) < 1e-6
        assert np.all(logits.grad[1] == 0)

    def test_l2_norm(self):
        x = Tensor(self.rng.normal(size=7), requires_grad=True)
        T.backward(T.l2_norm(x))
        np.testing.assert_allclose(x.grad, x.data / np.linalg.norm(x.data))

    def test_shared_node_accumulates(self):
        x = Tensor(np.array([3.0]), requires_grad=True)
        y = T.mul(x, x)
        T.backward(T.sum_all(T.add(y, y)))
        np.testing.assert_allclose(x.grad, [12.0])


class TestErrors:
    def test_matmul_shape_error_names_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4, 5\)"):
            T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))))

    def test_non_scalar_backward(self):
        with pytest.raises(ValueError, match="scalar"):
            T.backward(Tensor(np.zeros(3), requires_grad=True))

    def test_embedding_out_of_range(self):
        with pytest.raises(IndexError):
            T.embedding_lookup(Tensor(np.zeros((4, 2))), np.array([4]))

    def test_softmax_empty(self):
        with pytest.raises(ValueError):
            T.softmax_rows(Tensor(np.zeros((2, 0))))

    def test_softmax_large_values_stable(self):
        out = T.softmax_rows(Tensor(np.array([[1e300, 0.0, -1e300]]))).data
        assert np.all(np.isfinite(out)) and out[0, 0] == 1.0

    def test_negative_std(self):
        with pytest.raises(ValueError):
            T.sample_gaussian(RngStream(0, "x"), 3, -1.0)


class TestRngStream:
    def test_same_key_same_draws(self):
        a = RngStream(7, "client:3").generator.normal(size=5)
        b = RngStream(7, "client:3").generator.normal(size=5)
        np.testing.assert_array_equal(a, b)

    @pytest.mark.parametrize("other", [(8, "client:3"), (7, "client:4"), (7, "client:3/x")])
    def test_different_keys_differ(self, other):
        a = RngStream(7, "client:3").generator.normal(size=5)
        assert not np.array_equal(a, RngStream(*other).generator.normal(size=5))

    def test_child_is_order_independent(self):
        root = RngStream(1, "r")
        first = root.child("a").generator.random()
        root.child("b").generator.random()
        assert root.child("a").generator.random() == first
