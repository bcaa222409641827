"""Network layer primitives with explicit forward/backward passes.

All tensors are NHWC. Each layer caches what its backward pass needs during
forward; backward consumes the cache, fills the layer's gradient buffers, and
returns the gradient with respect to its input. Layers run in the dtype of
their parameters (float32 normally, float64 for finite-difference checks).
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

PROB_CLAMP = 1e-7


class Layer:
    """Minimal layer interface; parameterless layers leave params empty."""

    name = "layer"

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}

    def forward(self, x, train=True):
        raise NotImplementedError

    def backward(self, dout):
        raise NotImplementedError


def _windows(x_padded: np.ndarray, k: int) -> np.ndarray:
    """(N, H, W, k, k, C) sliding windows over the spatial axes, no copy."""
    w = sliding_window_view(x_padded, (k, k), axis=(1, 2))
    # sliding_window_view yields (N, H, W, C, k, k); put window axes before C
    return w.transpose(0, 1, 2, 4, 5, 3)


class Conv2D(Layer):
    """k x k convolution, stride 1, 'same' zero padding."""

    def __init__(self, cin, cout, ksize=3, rng=None, dtype=np.float32, name="conv"):
        super().__init__()
        self.name = name
        self.ksize = ksize
        self.pad = ksize // 2
        rng = rng or np.random.default_rng(0)
        fan_in = ksize * ksize * cin
        std = np.sqrt(2.0 / fan_in)
        self.params["w"] = rng.normal(0.0, std, size=(ksize, ksize, cin, cout)).astype(dtype)
        self.params["b"] = np.zeros(cout, dtype=dtype)
        self.grads["w"] = np.zeros_like(self.params["w"])
        self.grads["b"] = np.zeros_like(self.params["b"])
        self._x = None

    def forward(self, x, train=True):
        self._x = x if train else None
        xp = self._padded(x)
        out = np.einsum("nhwijc,ijco->nhwo", _windows(xp, self.ksize), self.params["w"],
                        optimize=True)
        return out + self.params["b"]

    def _padded(self, x):
        p = self.pad
        if p == 0:
            return x
        return np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)))

    def backward(self, dout):
        x = self._x
        xp = self._padded(x)
        self.grads["w"][...] = np.einsum(
            "nhwijc,nhwo->ijco", _windows(xp, self.ksize), dout, optimize=True
        )
        self.grads["b"][...] = dout.sum(axis=(0, 1, 2))
        # full correlation of dout with the spatially flipped kernel
        k = self.ksize
        w_flip = self.params["w"][::-1, ::-1]  # (k, k, cin, cout)
        q = k - 1 - self.pad
        dp = np.pad(dout, ((0, 0), (q, q), (q, q), (0, 0)))
        dx = np.einsum("nhwijo,ijco->nhwc", _windows(dp, k), w_flip, optimize=True)
        return dx


class BatchNorm(Layer):
    """Per-channel batch normalization over (batch, height, width)."""

    def __init__(self, channels, eps=1e-5, momentum=0.9, dtype=np.float32, name="bn"):
        super().__init__()
        self.name = name
        self.eps = eps
        self.momentum = momentum
        self.params["gamma"] = np.ones(channels, dtype=dtype)
        self.params["beta"] = np.zeros(channels, dtype=dtype)
        self.grads["gamma"] = np.zeros_like(self.params["gamma"])
        self.grads["beta"] = np.zeros_like(self.params["beta"])
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self._cache = None

    def forward(self, x, train=True):
        if train:
            mean = x.mean(axis=(0, 1, 2))
            var = x.var(axis=(0, 1, 2))
            inv_std = 1.0 / np.sqrt(var + self.eps)
            xhat = (x - mean) * inv_std
            self.running_mean = (
                self.momentum * self.running_mean + (1.0 - self.momentum) * mean
            ).astype(self.running_mean.dtype)
            self.running_var = (
                self.momentum * self.running_var + (1.0 - self.momentum) * var
            ).astype(self.running_var.dtype)
            self._cache = (xhat, inv_std)
        else:
            inv_std = 1.0 / np.sqrt(self.running_var + self.eps)
            xhat = (x - self.running_mean) * inv_std
            self._cache = None
        return self.params["gamma"] * xhat + self.params["beta"]

    def backward(self, dout):
        xhat, inv_std = self._cache
        m = dout.shape[0] * dout.shape[1] * dout.shape[2]
        self.grads["gamma"][...] = (dout * xhat).sum(axis=(0, 1, 2))
        self.grads["beta"][...] = dout.sum(axis=(0, 1, 2))
        dxhat = dout * self.params["gamma"]
        dx = (inv_std / m) * (
            m * dxhat
            - dxhat.sum(axis=(0, 1, 2))
            - xhat * (dxhat * xhat).sum(axis=(0, 1, 2))
        )
        return dx


class ReLU(Layer):
    def __init__(self, name="relu"):
        super().__init__()
        self.name = name
        self._mask = None

    def forward(self, x, train=True):
        self._mask = x > 0
        return x * self._mask

    def backward(self, dout):
        return dout * self._mask


def _as_pool_windows(x):
    n, h, w, c = x.shape
    return x.reshape(n, h // 2, 2, w // 2, 2, c).transpose(0, 1, 3, 5, 2, 4).reshape(
        n, h // 2, w // 2, c, 4
    )


def _from_pool_windows(win):
    n, ho, wo, c, _ = win.shape
    return win.reshape(n, ho, wo, c, 2, 2).transpose(0, 1, 4, 2, 5, 3).reshape(
        n, ho * 2, wo * 2, c
    )


def maxpool_indices(x: np.ndarray):
    """2x2 stride-2 max pool; returns pooled values and within-window argmax.

    Indices are in 0..3, row-major inside the window; ties take the first.
    """
    n, h, w, c = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"pooling needs even spatial dims, got {h}x{w}")
    win = _as_pool_windows(x)
    idx = win.argmax(axis=-1)
    pooled = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    return pooled, idx.astype(np.int8)


def max_unpool(x: np.ndarray, indices: np.ndarray) -> np.ndarray:
    """Place each value at its recorded argmax position in a 2x doubled map."""
    if x.shape != indices.shape:
        raise ValueError(f"value/index shape mismatch: {x.shape} vs {indices.shape}")
    win = np.zeros(x.shape + (4,), dtype=x.dtype)
    np.put_along_axis(win, indices.astype(np.int64)[..., None], x[..., None], axis=-1)
    return _from_pool_windows(win)


class MaxPool(Layer):
    """Pooling layer that records argmax indices for the paired unpool."""

    def __init__(self, name="pool"):
        super().__init__()
        self.name = name
        self.indices = None

    def forward(self, x, train=True):
        pooled, self.indices = maxpool_indices(x)
        return pooled

    def backward(self, dout):
        return max_unpool(dout, self.indices)


class MaxUnpool(Layer):
    """Upsampling layer consuming the indices of its encoder counterpart."""

    def __init__(self, pool: MaxPool, name="unpool"):
        super().__init__()
        self.name = name
        self.pool = pool

    def forward(self, x, train=True):
        return max_unpool(x, self.pool.indices)

    def backward(self, dout):
        win = _as_pool_windows(dout)
        return np.take_along_axis(win, self.pool.indices.astype(np.int64)[..., None], axis=-1)[
            ..., 0
        ]


def softmax(logits: np.ndarray) -> np.ndarray:
    """Numerically stable per-pixel softmax over the last axis."""
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def loss_and_grad(probabilities: np.ndarray, labels: np.ndarray):
    """Mean per-pixel cross-entropy and its gradient w.r.t. the logits."""
    num_classes = probabilities.shape[-1]
    labels = np.asarray(labels)
    if labels.min() < 0 or labels.max() >= num_classes:
        raise ValueError(f"labels out of range [0, {num_classes})")
    n_pixels = labels.size
    onehot = np.eye(num_classes, dtype=probabilities.dtype)[labels]
    picked = np.take_along_axis(probabilities, labels[..., None], axis=-1)
    loss = float(-np.log(np.clip(picked, PROB_CLAMP, 1.0)).sum() / n_pixels)
    grad = (probabilities - onehot) / n_pixels
    return loss, grad
