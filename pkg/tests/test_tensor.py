import math

import numpy as np
import pytest

from discgen import tensor as T
from discgen.errors import ContractError, DimensionError, UnsupportedOpError


def t(data, rg=True):
    return T.Tensor(np.asarray(data, dtype=float), requires_grad=rg)


class TestTensorBasics:
    def test_scalar_becomes_1x1(self):
        assert T.Tensor(3.0).shape == (1, 1)

    def test_1d_becomes_row(self):
        assert T.Tensor([1.0, 2.0, 3.0]).shape == (1, 3)

    def test_3d_rejected(self):
        with pytest.raises(DimensionError):
            T.Tensor(np.zeros((2, 2, 2)))

    def test_item_on_non_scalar(self):
        with pytest.raises(ContractError):
            t([[1.0, 2.0]]).item()

    def test_unknown_op_kind(self):
        with pytest.raises(UnsupportedOpError):
            T.forward_op("convolve", t([[1.0]]))

    def test_dispatch_matches_direct_call(self):
        a, b = t([[1.0, 2.0]]), t([[3.0], [4.0]])
        assert np.array_equal(T.forward_op("matmul", a, b).data,
                              T.matmul(a, b).data)


class TestHandOracles:
    def test_softmax_closed_form(self):
        # softmax([ln 1, ln 3]) = [1, 3] / 4
        x = t([[math.log(1.0), math.log(3.0)]])
        out = T.softmax(x)
        np.testing.assert_allclose(out.data, [[0.25, 0.75]], atol=1e-15)

    def test_mean_of_square_gradient(self):
        # f(x) = mean(x*x) at scalar x=3: df/dx = 2x = 6
        x = t(3.0)
        loss = T.mean(T.mul(x, x))
        T.backward(loss)
        assert x.grad[0, 0] == pytest.approx(6.0, abs=1e-12)

    def test_mse_value_and_grad(self):
        a, b = t([[1.0, 2.0]]), t([[0.0, 0.0]], rg=False)
        loss = T.mse(a, b)
        assert loss.item() == pytest.approx(2.5)
        T.backward(loss)
        np.testing.assert_allclose(a.grad, [[1.0, 2.0]])

    def test_layer_norm_constant_row_is_zero(self):
        x = t([[5.0, 5.0, 5.0]])
        g, b = t(np.ones((1, 3)), rg=False), t(np.zeros((1, 3)), rg=False)
        out = T.layer_norm(x, g, b)
        np.testing.assert_allclose(out.data, 0.0, atol=1e-6)

    def test_backward_requires_scalar(self):
        with pytest.raises(ContractError):
            T.backward(t([[1.0, 2.0]]))


class TestFanOut:
    def test_reused_input_grads_add(self):
        # y = x*x via two uses of the same tensor equals duplicating the input
        x = t([[2.0, -1.0]])
        loss = T.mean(T.mul(x, x))
        T.backward(loss)
        x1, x2 = t([[2.0, -1.0]]), t([[2.0, -1.0]])
        loss2 = T.mean(T.mul(x1, x2))
        T.backward(loss2)
        np.testing.assert_allclose(x.grad, x1.grad + x2.grad)

    def test_add_backward_no_aliasing(self):
        # both parents of add receive the same upstream array; their grads
        # must be independent buffers afterwards
        a, b = t([[1.0, 2.0]]), t([[3.0, 4.0]])
        s = T.add(a, b)
        loss = T.mean(T.mul(s, s))
        T.backward(loss)
        assert a.grad is not b.grad
        a.grad += 100.0
        np.testing.assert_allclose(b.grad, s.data)  # d mean(s^2)/ds = s for size 2


class TestGradCheckPerOp:
    """Finite-difference verification of every op over random shapes."""

    def test_all_ops_under_threshold(self):
        from discgen.gradcheck import check_ops, PER_OP_THRESHOLD
        worst = check_ops(seeds=20)
        expected = {"matmul", "transpose", "add", "add_row_broadcast",
                    "add_col_broadcast", "mul", "smul", "relu", "tanh",
                    "softmax", "layer_norm", "concat", "slice", "reshape",
                    "mean", "mse", "gather_rows", "tile_rows",
                    "multihead_attention"}
        assert set(worst) == expected
        for name, err in worst.items():
            assert err < PER_OP_THRESHOLD, f"{name}: {err}"


class TestAttention:
    def test_blocks_are_independent(self):
        # two stacked blocks give the same output as two separate calls
        rng = np.random.default_rng(0)
        d, heads = 8, 2
        ws = [t(rng.standard_normal((d, d)), rg=False) for _ in range(4)]
        q1, q2 = rng.standard_normal((3, d)), rng.standard_normal((3, d))
        k1, k2 = rng.standard_normal((5, d)), rng.standard_normal((5, d))
        joint = T.multihead_attention(t(np.vstack([q1, q2]), rg=False),
                                      t(np.vstack([k1, k2]), rg=False),
                                      *ws, heads=heads, blocks=2)
        solo1 = T.multihead_attention(t(q1, rg=False), t(k1, rg=False),
                                      *ws, heads=heads, blocks=1)
        solo2 = T.multihead_attention(t(q2, rg=False), t(k2, rg=False),
                                      *ws, heads=heads, blocks=1)
        np.testing.assert_allclose(joint.data, np.vstack([solo1.data, solo2.data]),
                                   atol=1e-12)

    def test_uniform_keys_average_values(self):
        # identical keys -> uniform attention -> output is the mean value row
        d, heads = 4, 2
        eye = t(np.eye(d), rg=False)
        zero = t(np.zeros((d, d)), rg=False)
        kv = t(np.ones((3, 1)) @ np.ones((1, d)), rg=False)  # identical rows
        q = t(np.random.default_rng(1).standard_normal((2, d)), rg=False)
        # wk = 0 makes all scores equal regardless of query
        v_in = np.array([[1.0, 2.0, 3.0, 4.0],
                         [5.0, 6.0, 7.0, 8.0],
                         [9.0, 10.0, 11.0, 12.0]])
        out = T.multihead_attention(q, t(v_in, rg=False), eye, zero, eye, eye,
                                    heads=heads, blocks=1)
        np.testing.assert_allclose(out.data, np.tile(v_in.mean(axis=0), (2, 1)),
                                   atol=1e-12)

    def test_head_count_must_divide(self):
        a = t(np.zeros((2, 6)), rg=False)
        w = t(np.zeros((6, 6)), rg=False)
        with pytest.raises(ContractError):
            T.multihead_attention(a, a, w, w, w, w, heads=4)


class TestDeterminism:
    def test_backward_bit_identical(self):
        def build():
            rng = np.random.default_rng(7)
            a = t(rng.standard_normal((4, 5)))
            b = t(rng.standard_normal((5, 3)))
            h = T.relu(T.matmul(a, b))
            loss = T.mse(h, t(rng.standard_normal((4, 3)), rg=False))
            T.backward(loss)
            return a.grad.copy(), b.grad.copy()
        g1, g2 = build(), build()
        assert np.array_equal(g1[0], g2[0]) and np.array_equal(g1[1], g2[1])

    def test_zero_grads(self):
        a = t([[1.0]])
        T.backward(T.mean(T.mul(a, a)))
        assert a.grad is not None
        T.zero_grads([a])
        assert a.grad is None


class TestDebugChecks:
    def test_nan_detection(self):
        T.set_debug_checks(True)
        try:
            bad = t([[np.inf]])
            with pytest.raises(ContractError):
                T.add(bad, bad)
        finally:
            T.set_debug_checks(False)
