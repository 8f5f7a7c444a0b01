"""Finite-difference checks for every autodiff primitive.

Each op is verified against central differences in float64.  The helper
perturbs every input entry, so keep test shapes small.
"""

import numpy as np
import pytest

from spxc import autodiff as ad


def numerical_grad(f, x, eps=1e-6):
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = f(x)
        flat[i] = orig - eps
        lo = f(x)
        flat[i] = orig
        gf[i] = (hi - lo) / (2 * eps)
    return g


def check_op(build, x, rtol=1e-6, atol=1e-8):
    """build(tensor) -> scalar Tensor; compares backward grad to FD."""
    t = ad.Tensor(x.copy(), requires_grad=True)
    out = build(t)
    out.backward()
    num = numerical_grad(lambda v: build(ad.Tensor(v)).item(), x.copy())
    np.testing.assert_allclose(t.grad, num, rtol=rtol, atol=atol)


RNG = np.random.default_rng(7)


def rand(*shape):
    return RNG.standard_normal(shape)


class TestElementwise:
    def test_add_broadcast(self):
        a = rand(3, 4)
        b = rand(4)
        ta = ad.Tensor(a.copy(), requires_grad=True)
        tb = ad.Tensor(b.copy(), requires_grad=True)
        out = ad.sum_(ad.mul(ad.add(ta, tb), ad.add(ta, tb)))
        out.backward()
        num_a = numerical_grad(lambda v: (((v + b) ** 2).sum()), a.copy())
        num_b = numerical_grad(lambda v: (((a + v) ** 2).sum()), b.copy())
        np.testing.assert_allclose(ta.grad, num_a, rtol=1e-6)
        np.testing.assert_allclose(tb.grad, num_b, rtol=1e-6)

    @pytest.mark.parametrize("op", [ad.exp, ad.tanh, ad.sigmoid, ad.softplus, ad.elu, ad.square])
    def test_unary(self, op):
        check_op(lambda t: ad.sum_(op(t)), rand(5, 3))

    def test_log(self):
        check_op(lambda t: ad.sum_(ad.log(t)), np.abs(rand(4, 4)) + 0.5)

    def test_relu(self):
        x = rand(6, 6)
        x[np.abs(x) < 1e-3] += 0.1  # keep away from the kink
        check_op(lambda t: ad.sum_(ad.relu(t)), x)

    def test_clip(self):
        x = rand(5, 5) * 2
        x[np.abs(np.abs(x) - 1.0) < 1e-3] = 0.0
        check_op(lambda t: ad.sum_(ad.square(ad.clip(t, -1.0, 1.0))), x)

    def test_where(self):
        x = rand(4, 4)
        cond = x > 0
        check_op(lambda t: ad.sum_(ad.where(cond, ad.square(t), ad.mul(t, 3.0))), x)

    def test_mul_scalar_keeps_dtype(self):
        t = ad.Tensor(np.ones((2, 2), dtype=np.float32), requires_grad=True)
        out = ad.mul(ad.add(t, 1.0), 2.0)
        assert out.dtype == np.float32

    def test_sub(self):
        a = ad.Tensor(np.array([3.0]), requires_grad=True)
        out = ad.sum_(a - 1.0)
        out.backward()
        assert out.item() == 2.0
        np.testing.assert_allclose(a.grad, [1.0])


class TestReductionsShapes:
    def test_sum_axis(self):
        check_op(lambda t: ad.sum_(ad.square(ad.sum_(t, axis=1))), rand(3, 5))

    def test_sum_keepdims(self):
        check_op(lambda t: ad.sum_(ad.square(ad.sum_(t, axis=0, keepdims=True))), rand(3, 5))

    def test_mean(self):
        check_op(lambda t: ad.sum_(ad.square(ad.mean(t, axis=(1, 2)))), rand(2, 3, 4))

    def test_reshape_transpose(self):
        check_op(lambda t: ad.sum_(ad.square(ad.transpose(ad.reshape(t, (4, 6)), (1, 0)))), rand(2, 3, 4))

    def test_getitem(self):
        check_op(lambda t: ad.sum_(ad.square(t[:, 1:3])), rand(3, 5))

    def test_concat(self):
        a = rand(2, 3)
        b = rand(2, 2)
        ta = ad.Tensor(a.copy(), requires_grad=True)
        tb = ad.Tensor(b.copy(), requires_grad=True)
        ad.sum_(ad.square(ad.concat([ta, tb], axis=1))).backward()
        np.testing.assert_allclose(ta.grad, 2 * a, rtol=1e-12)
        np.testing.assert_allclose(tb.grad, 2 * b, rtol=1e-12)

    def test_pad2d(self):
        check_op(lambda t: ad.sum_(ad.square(ad.pad2d(t, (1, 0, 2, 1)))), rand(2, 2, 3, 3))

    def test_matmul(self):
        a = rand(3, 4)
        b = rand(4, 2)
        ta = ad.Tensor(a.copy(), requires_grad=True)
        tb = ad.Tensor(b.copy(), requires_grad=True)
        ad.sum_(ad.square(ad.matmul(ta, tb))).backward()
        num_a = numerical_grad(lambda v: ((v @ b) ** 2).sum(), a.copy())
        num_b = numerical_grad(lambda v: ((a @ v) ** 2).sum(), b.copy())
        np.testing.assert_allclose(ta.grad, num_a, rtol=1e-6)
        np.testing.assert_allclose(tb.grad, num_b, rtol=1e-6)


class TestConvs:
    @pytest.mark.parametrize("stride,hw,k", [(1, (5, 6), (2, 3)), (2, (6, 7), (2, 2)), (2, (7, 7), (3, 3))])
    def test_conv2d_grads(self, stride, hw, k):
        x = rand(2, 3, *hw)
        w = rand(4, 3, *k)
        tx = ad.Tensor(x.copy(), requires_grad=True)
        tw = ad.Tensor(w.copy(), requires_grad=True)
        ad.sum_(ad.square(ad.conv2d(tx, tw, stride=stride))).backward()

        def fwd(xv, wv):
            with ad.no_grad():
                return ad.sum_(ad.square(ad.conv2d(ad.Tensor(xv), ad.Tensor(wv), stride=stride))).item()

        num_x = numerical_grad(lambda v: fwd(v, w), x.copy())
        num_w = numerical_grad(lambda v: fwd(x, v), w.copy())
        np.testing.assert_allclose(tx.grad, num_x, rtol=1e-5, atol=1e-7)
        np.testing.assert_allclose(tw.grad, num_w, rtol=1e-5, atol=1e-7)

    def test_conv2d_matches_direct_computation(self):
        x = rand(1, 2, 4, 4)
        w = rand(3, 2, 2, 2)
        with ad.no_grad():
            out = ad.conv2d(ad.Tensor(x), ad.Tensor(w)).data
        ref = np.zeros((1, 3, 3, 3))
        for o in range(3):
            for i in range(3):
                for j in range(3):
                    ref[0, o, i, j] = (x[0, :, i:i + 2, j:j + 2] * w[o]).sum()
        np.testing.assert_allclose(out, ref, rtol=1e-12)

    def test_zero_stuff2(self):
        check_op(lambda t: ad.sum_(ad.square(ad.zero_stuff2(t))), rand(2, 2, 3, 3))
        with ad.no_grad():
            out = ad.zero_stuff2(ad.Tensor(np.ones((1, 1, 2, 2)))).data
        assert out.shape == (1, 1, 4, 4)
        assert out.sum() == 4.0
        assert out[0, 0, 0, 0] == 1.0 and out[0, 0, 1, 1] == 0.0

    def test_upsample_nearest2(self):
        check_op(lambda t: ad.sum_(ad.square(ad.upsample_nearest2(t))), rand(2, 2, 3, 3))

    def test_maxpool2(self):
        x = rand(2, 3, 4, 6)
        # perturb away from ties so FD is valid
        x += np.linspace(0, 1e-3, x.size).reshape(x.shape)
        check_op(lambda t: ad.sum_(ad.square(ad.maxpool2(t))), x)


class TestComposites:
    def test_shift_down_moves_rows(self):
        x = np.arange(9, dtype=float).reshape(1, 1, 3, 3)
        with ad.no_grad():
            out = ad.shift_down(ad.Tensor(x)).data
        np.testing.assert_array_equal(out[0, 0, 0], 0)
        np.testing.assert_array_equal(out[0, 0, 1:], x[0, 0, :2])

    def test_shift_right_moves_cols(self):
        x = np.arange(9, dtype=float).reshape(1, 1, 3, 3)
        with ad.no_grad():
            out = ad.shift_right(ad.Tensor(x)).data
        np.testing.assert_array_equal(out[0, 0, :, 0], 0)
        np.testing.assert_array_equal(out[0, 0, :, 1:], x[0, 0, :, :2])

    def test_logsumexp(self):
        x = rand(3, 5) * 3
        check_op(lambda t: ad.sum_(ad.square(ad.logsumexp(t, axis=1))), x)
        with ad.no_grad():
            out = ad.logsumexp(ad.Tensor(x), axis=1).data
        np.testing.assert_allclose(out, np.log(np.exp(x).sum(axis=1)), rtol=1e-10)

    def test_log_softmax_normalizes(self):
        x = rand(4, 6)
        with ad.no_grad():
            ls = ad.log_softmax(ad.Tensor(x), axis=1).data
        np.testing.assert_allclose(np.exp(ls).sum(axis=1), 1.0, rtol=1e-10)
        check_op(lambda t: ad.sum_(ad.square(ad.log_softmax(t, axis=1))), x)

    def test_concat_elu_shape(self):
        with ad.no_grad():
            out = ad.concat_elu(ad.Tensor(rand(2, 3, 4, 4))).data
        assert out.shape == (2, 6, 4, 4)

    def test_dropout_scales_and_masks(self):
        rng = np.random.default_rng(0)
        t = ad.Tensor(np.ones((1000,)), requires_grad=True)
        out = ad.dropout(t, 0.5, rng)
        kept = out.data != 0
        assert abs(kept.mean() - 0.5) < 0.08
        np.testing.assert_allclose(out.data[kept], 2.0)
        ad.sum_(out).backward()
        np.testing.assert_allclose(t.grad[kept], 2.0)
        np.testing.assert_allclose(t.grad[~kept], 0.0)

    def test_no_grad_blocks_tape(self):
        t = ad.Tensor(rand(3), requires_grad=True)
        with ad.no_grad():
            out = ad.sum_(ad.square(t))
        assert not out.requires_grad

    def test_stop_gradient(self):
        t = ad.Tensor(rand(3), requires_grad=True)
        out = ad.sum_(ad.mul(ad.stop_gradient(t), t))
        out.backward()
        np.testing.assert_allclose(t.grad, t.data)
