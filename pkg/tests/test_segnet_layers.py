import numpy as np
import pytest

from razemeter.segnet.layers import (
    BatchNorm, Conv2D, MaxPool, MaxUnpool, ReLU, loss_and_grad, max_unpool,
    maxpool_indices, softmax,
)


def finite_diff_check(layer, x, param_key=None, n_probes=6, eps=1e-6, seed=0):
    """Central finite differences on the loss sum(out * r), r fixed random.

    A linear projection avoids degenerate losses (for BatchNorm the output
    second moment is pinned, so quadratic losses have near-zero gradients).
    """
    rng = np.random.default_rng(seed)
    out0 = layer.forward(x, train=True)
    r = rng.standard_normal(out0.shape)

    def loss():
        out = layer.forward(x, train=True)
        return float((out * r).sum()), out

    layer.forward(x, train=True)
    dx = layer.backward(r)

    if param_key is None:
        target, grad = x, dx
    else:
        target, grad = layer.params[param_key], layer.grads[param_key]
    flat, gflat = target.ravel(), grad.ravel()
    worst = 0.0
    for i in rng.choice(flat.size, size=min(n_probes, flat.size), replace=False):
        orig = flat[i]
        flat[i] = orig + eps
        lp, _ = loss()
        flat[i] = orig - eps
        lm, _ = loss()
        flat[i] = orig
        fd = (lp - lm) / (2 * eps)
        denom = max(abs(fd), abs(gflat[i]), 1e-8)
        worst = max(worst, abs(fd - gflat[i]) / denom)
    return worst


class TestConv2D:
    def test_shape(self):
        conv = Conv2D(3, 8, 3, np.random.default_rng(0))
        out = conv.forward(np.zeros((2, 16, 16, 3), dtype=np.float32))
        assert out.shape == (2, 16, 16, 8)

    def test_known_kernel(self):
        # identity kernel: center tap 1 on a single channel
        conv = Conv2D(1, 1, 3, np.random.default_rng(0), dtype=np.float64)
        conv.params["w"][...] = 0.0
        conv.params["w"][1, 1, 0, 0] = 1.0
        conv.params["b"][...] = 0.0
        x = np.random.default_rng(1).random((1, 6, 6, 1))
        assert np.allclose(conv.forward(x), x)

    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(2)
        conv = Conv2D(3, 4, 3, rng, dtype=np.float64)
        x = rng.random((2, 6, 6, 3))
        for key in ("w", "b"):
            assert finite_diff_check(conv, x, key) <= 1e-4
        assert finite_diff_check(conv, x, None) <= 1e-4

    def test_1x1_conv(self):
        rng = np.random.default_rng(3)
        conv = Conv2D(4, 2, 1, rng, dtype=np.float64)
        x = rng.random((1, 5, 5, 4))
        out = conv.forward(x)
        assert out.shape == (1, 5, 5, 2)
        assert finite_diff_check(conv, x, "w") <= 1e-4


class TestBatchNorm:
    def test_train_normalizes(self):
        rng = np.random.default_rng(0)
        bn = BatchNorm(4, dtype=np.float64)
        x = rng.random((3, 8, 8, 4)) * 5 + 2
        out = bn.forward(x, train=True)
        assert np.allclose(out.mean(axis=(0, 1, 2)), 0.0, atol=1e-5)
        assert np.allclose(out.var(axis=(0, 1, 2)), 1.0, atol=1e-4)

    def test_infer_uses_running_stats(self):
        bn = BatchNorm(2, dtype=np.float64)
        x = np.random.default_rng(1).random((2, 4, 4, 2))
        out = bn.forward(x, train=False)
        # fresh running stats (0, 1): output is x / sqrt(1 + eps)
        assert np.allclose(out, x / np.sqrt(1 + bn.eps))

    def test_running_stats_ema(self):
        rng = np.random.default_rng(2)
        bn = BatchNorm(3, momentum=0.9, dtype=np.float64)
        x = rng.random((2, 4, 4, 3)) + 10.0
        bn.forward(x, train=True)
        expected = 0.9 * 0.0 + 0.1 * x.mean(axis=(0, 1, 2))
        assert np.allclose(bn.running_mean, expected)

    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(3)
        bn = BatchNorm(3, dtype=np.float64)
        bn.params["gamma"][...] = rng.random(3) + 0.5
        bn.params["beta"][...] = rng.random(3)
        x = rng.random((2, 5, 5, 3))
        for key in ("gamma", "beta"):
            assert finite_diff_check(bn, x, key) <= 1e-4
        assert finite_diff_check(bn, x, None) <= 1e-4


class TestMaxPool:
    def test_simple_window(self):
        x = np.array([[1, 2], [3, 4]], dtype=np.float32).reshape(1, 2, 2, 1)
        pooled, idx = maxpool_indices(x)
        assert pooled[0, 0, 0, 0] == 4
        assert idx[0, 0, 0, 0] == 3  # bottom-right, row-major

    def test_tie_takes_first(self):
        x = np.full((1, 2, 2, 1), 5.0, dtype=np.float32)
        pooled, idx = maxpool_indices(x)
        assert pooled[0, 0, 0, 0] == 5
        assert idx[0, 0, 0, 0] == 0  # top-left

    def test_matches_brute_force(self):
        rng = np.random.default_rng(0)
        x = rng.random((2, 8, 8, 3)).astype(np.float32)
        pooled, _ = maxpool_indices(x)
        for n in range(2):
            for y in range(4):
                for xx in range(4):
                    for c in range(3):
                        window = x[n, 2 * y:2 * y + 2, 2 * xx:2 * xx + 2, c]
                        assert pooled[n, y, xx, c] == window.max()

    def test_odd_dims_rejected(self):
        with pytest.raises(ValueError):
            maxpool_indices(np.zeros((1, 5, 4, 1), dtype=np.float32))


class TestMaxUnpool:
    def test_round_trip_placement(self):
        rng = np.random.default_rng(1)
        x = rng.random((2, 8, 8, 3)).astype(np.float32)
        pooled, idx = maxpool_indices(x)
        up = max_unpool(pooled, idx)
        assert up.shape == x.shape
        # nonzeros exactly at argmax positions with window-max values
        nz = up != 0
        for n in range(2):
            for y in range(4):
                for xx in range(4):
                    for c in range(3):
                        window = up[n, 2 * y:2 * y + 2, 2 * xx:2 * xx + 2, c]
                        assert (window != 0).sum() <= 1
                        assert window.sum() == pooled[n, y, xx, c]

    def test_zero_tensor(self):
        x = np.zeros((1, 4, 4, 2), dtype=np.float32)
        pooled, idx = maxpool_indices(x)
        assert (max_unpool(pooled, idx) == 0).all()

    def test_mass_conservation(self):
        rng = np.random.default_rng(2)
        x = rng.random((1, 16, 16, 4)).astype(np.float32)
        pooled, idx = maxpool_indices(x)
        up = max_unpool(pooled, idx)
        assert up.sum() == pytest.approx(pooled.sum(), rel=1e-6)

    def test_shape_mismatch_rejected(self):
        rng = np.random.default_rng(3)
        x = rng.random((1, 4, 4, 2)).astype(np.float32)
        _, idx = maxpool_indices(x)
        with pytest.raises(ValueError):
            max_unpool(np.zeros((1, 4, 4, 2), dtype=np.float32), idx)

    def test_random_placement_property(self):
        # pool->unpool: nonzero exactly at recorded indices, for many tensors
        rng = np.random.default_rng(4)
        for _ in range(20):
            shape = (1, int(rng.integers(1, 5)) * 2, int(rng.integers(1, 5)) * 2,
                     int(rng.integers(1, 4)))
            x = rng.standard_normal(shape).astype(np.float32) + 10.0
            pooled, idx = maxpool_indices(x)
            up = max_unpool(pooled, idx)
            win = up.reshape(shape[0], shape[1] // 2, 2, shape[2] // 2, 2, shape[3])
            win = win.transpose(0, 1, 3, 5, 2, 4).reshape(
                shape[0], shape[1] // 2, shape[2] // 2, shape[3], 4)
            nz_idx = np.abs(win).argmax(axis=-1)
            assert (nz_idx == idx).all()
            assert ((win != 0).sum(axis=-1) == 1).all()


class TestSoftmaxAndLoss:
    def test_rows_sum_to_one(self):
        rng = np.random.default_rng(0)
        logits = rng.standard_normal((2, 8, 8, 6)) * 10
        p = softmax(logits)
        assert np.allclose(p.sum(axis=-1), 1.0, atol=1e-6)

    def test_perfect_prediction_near_zero_loss(self):
        labels = np.zeros((1, 4, 4), dtype=int)
        probs = np.zeros((1, 4, 4, 6))
        probs[..., 0] = 1.0
        loss, _ = loss_and_grad(probs, labels)
        assert loss <= 1e-6

    def test_uniform_prediction_ln6(self):
        labels = np.zeros((1, 4, 4), dtype=int)
        probs = np.full((1, 4, 4, 6), 1 / 6)
        loss, _ = loss_and_grad(probs, labels)
        assert loss == pytest.approx(np.log(6), abs=1e-4)

    def test_out_of_range_label_rejected(self):
        probs = np.full((1, 2, 2, 6), 1 / 6)
        with pytest.raises(ValueError):
            loss_and_grad(probs, np.full((1, 2, 2), 6))

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(1)
        logits = rng.standard_normal((1, 4, 4, 6))
        labels = rng.integers(0, 6, (1, 4, 4))
        _, grad = loss_and_grad(softmax(logits), labels)
        eps = 1e-6
        worst = 0.0
        flat = logits.ravel()
        for i in rng.choice(flat.size, size=10, replace=False):
            orig = flat[i]
            flat[i] = orig + eps
            lp, _ = loss_and_grad(softmax(logits), labels)
            flat[i] = orig - eps
            lm, _ = loss_and_grad(softmax(logits), labels)
            flat[i] = orig
            fd = (lp - lm) / (2 * eps)
            denom = max(abs(fd), abs(grad.ravel()[i]), 1e-8)
            worst = max(worst, abs(fd - grad.ravel()[i]) / denom)
        assert worst <= 1e-4


def test_relu_backward_masks():
    relu = ReLU()
    x = np.array([[-1.0, 2.0], [0.0, 3.0]])
    out = relu.forward(x)
    assert (out == np.array([[0, 2], [0, 3]])).all()
    dx = relu.backward(np.ones_like(x))
    assert (dx == np.array([[0, 1], [0, 1]])).all()
