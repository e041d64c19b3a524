"""Finite-difference verification of every autodiff op the model uses."""

import numpy as np
import pytest

from eventcast import autodiff as ad


def numeric_grad(fn, x: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Central-difference gradient of a scalar-valued fn at x."""
    g = np.zeros_like(x)
    flat = x.ravel()
    gflat = g.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = fn(x)
        flat[i] = orig - eps
        lo = fn(x)
        flat[i] = orig
        gflat[i] = (hi - lo) / (2 * eps)
    return g


def check_op(build, shapes, seed=0, atol=1e-7, rtol=1e-5):
    """build(list of Tensors) -> scalar Tensor; checks grads for every input."""
    rng = np.random.default_rng(seed)
    arrays = [rng.standard_normal(s) for s in shapes]
    tensors = [ad.tensor(a.copy(), requires_grad=True) for a in arrays]
    out = build(tensors)
    out.backward()
    for k, (arr, t) in enumerate(zip(arrays, tensors)):
        def fn(x, k=k):
            args = [ad.tensor(a.copy()) for a in arrays]
            args[k] = ad.tensor(x.copy())
            return build(args).item()
        expected = numeric_grad(fn, arr.copy())
        np.testing.assert_allclose(t.grad, expected, atol=atol, rtol=rtol,
                                   err_msg=f"input {k}")


class TestBasicOps:
    def test_square_at_three(self):
        x = ad.tensor(3.0, requires_grad=True)
        y = x * x
        y.backward()
        assert y.item() == 9.0
        assert x.grad == pytest.approx(6.0)

    def test_add_broadcast(self):
        check_op(lambda ts: (ts[0] + ts[1]).sum(), [(3, 4), (4,)])

    def test_sub_scalar_tensor(self):
        check_op(lambda ts: (1.0 - ts[0]).sum(), [(5,)])

    def test_mul_broadcast(self):
        check_op(lambda ts: (ts[0] * ts[1]).sum(), [(2, 3, 4), (3, 4)])

    def test_div(self):
        def build(ts):
            return (ts[0] / (ts[1] * ts[1] + 1.0)).sum()
        check_op(build, [(3, 3), (3, 3)])

    def test_pow(self):
        def build(ts):
            return ((ts[0] * ts[0] + 1.0) ** 1.5).sum()
        check_op(build, [(4,)])

    def test_neg_exp_log_sqrt(self):
        def build(ts):
            return ((-ts[0]).exp() + (ts[0] * ts[0] + 1.0).log() + (ts[0] * ts[0] + 2.0).sqrt()).sum()
        check_op(build, [(6,)])

    def test_activations(self):
        def build(ts):
            return (ts[0].tanh() + ts[0].sigmoid() + ts[0].silu()).sum()
        check_op(build, [(7,)])

    def test_relu_off_kink(self):
        rng = np.random.default_rng(1)
        x = rng.standard_normal(50)
        x = x[np.abs(x) > 1e-3][:20]
        t = ad.tensor(x.copy(), requires_grad=True)
        (t.relu() * 2.0).sum().backward()
        np.testing.assert_allclose(t.grad, np.where(x > 0, 2.0, 0.0))


class TestMatmul:
    def test_2d_2d(self):
        check_op(lambda ts: (ts[0] @ ts[1]).sum(), [(3, 4), (4, 5)])

    def test_3d_2d(self):
        check_op(lambda ts: (ts[0] @ ts[1]).sum(), [(2, 3, 4), (4, 5)])

    def test_3d_3d(self):
        check_op(lambda ts: (ts[0] @ ts[1]).sum(), [(2, 3, 4), (2, 4, 5)])

    def test_weighted_output(self):
        def build(ts):
            return ((ts[0] @ ts[1]) * (ts[0] @ ts[1])).sum()
        check_op(build, [(4, 3), (3, 2)])


class TestReductionsAndShapes:
    def test_sum_axis(self):
        check_op(lambda ts: (ts[0].sum(axis=1) ** 2.0).sum(), [(3, 4)])

    def test_sum_keepdims(self):
        check_op(lambda ts: (ts[0] - ts[0].sum(axis=-1, keepdims=True)).sum(), [(2, 5)])

    def test_mean(self):
        check_op(lambda ts: (ts[0].mean(axis=0) * ts[0].mean(axis=0)).sum(), [(4, 3)])

    def test_reshape_transpose(self):
        def build(ts):
            y = ts[0].reshape(2, 3, 4).transpose(1, 0, 2).reshape(3, 8)
            return (y * y).sum()
        check_op(build, [(6, 4)])

    def test_concat(self):
        def build(ts):
            y = ad.concat([ts[0], ts[1]], axis=-1)
            return (y * y).sum()
        check_op(build, [(3, 2), (3, 4)])


class TestFusedOps:
    def test_softmax_rows_sum_to_one(self):
        rng = np.random.default_rng(3)
        x = ad.tensor(rng.standard_normal((5, 9)) * 4.0)
        s = ad.softmax(x)
        np.testing.assert_allclose(s.data.sum(axis=-1), 1.0, atol=1e-12)

    def test_softmax_grad(self):
        def build(ts):
            s = ad.softmax(ts[0])
            return (s * ts[1]).sum()
        check_op(build, [(4, 6), (4, 6)])

    def test_layer_norm_grad(self):
        def build(ts):
            y = ad.layer_norm(ts[0], ts[1], ts[2])
            return (y * y).sum()
        check_op(build, [(3, 8), (8,), (8,)], atol=5e-7)

    def test_bce_matches_analytic(self):
        logits = ad.tensor(np.array([0.0, 20.0]), requires_grad=True)
        targets = np.array([1.0, 1.0])
        loss = ad.bce_with_logits(logits, targets).mean()
        assert loss.item() == pytest.approx((np.log(2.0) + 0.0) / 2, abs=1e-8)

    def test_bce_grad(self):
        rng = np.random.default_rng(4)
        targets = rng.integers(0, 2, size=(3, 5)).astype(float)

        def build(ts):
            return ad.bce_with_logits(ts[0], targets).mean()
        check_op(build, [(3, 5)])

    def test_dropout_scaling_and_eval_identity(self):
        rng = np.random.default_rng(5)
        x = ad.tensor(np.ones((1000,)), requires_grad=True)
        y = ad.dropout(x, 0.25, np.random.default_rng(0))
        kept = y.data != 0
        assert abs(kept.mean() - 0.75) < 0.05
        np.testing.assert_allclose(y.data[kept], 1.0 / 0.75)
        z = ad.dropout(x, 0.0, rng)
        assert z is x


class TestGraphSemantics:
    def test_backward_without_graph_raises(self):
        x = ad.tensor(2.0)
        with pytest.raises(RuntimeError):
            x.backward()

    def test_backward_under_no_grad_raises(self):
        x = ad.tensor(2.0, requires_grad=True)
        with ad.no_grad():
            y = x * x
        with pytest.raises(RuntimeError):
            y.backward()

    def test_backward_non_scalar_raises(self):
        x = ad.tensor(np.ones(3), requires_grad=True)
        y = x * 2.0
        with pytest.raises(RuntimeError):
            y.backward()

    def test_grad_accumulates_over_reuse(self):
        x = ad.tensor(3.0, requires_grad=True)
        y = x * x + x * 4.0
        y.backward()
        assert x.grad == pytest.approx(10.0)

    def test_no_grad_skips_recording(self):
        x = ad.tensor(np.ones(4), requires_grad=True)
        with ad.no_grad():
            y = x * 2.0
        assert not y.requires_grad
        assert y._parents == ()

    def test_float32_dtype_preserved(self):
        x = ad.tensor(np.ones((2, 2)), dtype=np.float32, requires_grad=True)
        y = ((x @ x) * 0.5).sum()
        assert y.dtype == np.float32
        y.backward()
        assert x.grad.dtype == np.float32
