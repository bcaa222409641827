"""Encoder/decoder segmentation model with pooling-index sharing.

Each encoder module stacks conv->batchnorm blocks, then one index-recording
max pool and one ReLU. Each decoder module starts with a max unpool that
consumes the indices of the encoder module at the same hierarchy, followed by
the mirrored conv->batchnorm stack, the last block followed by ReLU. The head
is a 1x1 conv to class logits plus a per-pixel softmax.

The single-activation-per-module ordering is deliberate; set
``relu_per_conv=True`` for the conventional activation after every conv block.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .layers import BatchNorm, Conv2D, MaxPool, MaxUnpool, ReLU, softmax


class NonFiniteActivationError(FloatingPointError):
    """A forward pass produced NaN/Inf; carries the offending layer's name."""

    def __init__(self, layer_name: str):
        super().__init__(f"non-finite activation after layer {layer_name!r}")
        self.layer_name = layer_name


@dataclass(frozen=True)
class SegNetConfig:
    modules: int = 3
    convs_per_module: int = 3
    channels: tuple[int, ...] = (32, 64, 128)
    num_classes: int = 6
    in_channels: int = 3
    relu_per_conv: bool = False
    bn_epsilon: float = 1e-5
    bn_momentum: float = 0.9

    def __post_init__(self):
        if not 3 <= self.convs_per_module <= 5:
            raise ValueError("convs_per_module must be in [3, 5]")
        if len(self.channels) != self.modules:
            raise ValueError("need one channel width per module")
        if self.modules < 1 or 256 % (2 ** self.modules) != 0:
            raise ValueError("modules must be >= 1 and 256 divisible by 2^modules")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")


class SegNetModel:
    """All layers, parameters, and batch-norm running statistics."""

    def __init__(self, config: SegNetConfig = SegNetConfig(), seed: int = 0,
                 dtype=np.float32):
        self.config = config
        self.dtype = dtype
        rng = np.random.default_rng(seed)
        ch = config.channels

        def block_relu(name):
            return ReLU(name=name) if config.relu_per_conv else None

        self.encoder_modules = []
        cin = config.in_channels
        for m in range(config.modules):
            blocks = []
            for k in range(config.convs_per_module):
                conv = Conv2D(cin, ch[m], 3, rng, dtype, name=f"enc{m}.conv{k}")
                bn = BatchNorm(ch[m], config.bn_epsilon, config.bn_momentum, dtype,
                               name=f"enc{m}.bn{k}")
                blocks.append((conv, bn, block_relu(f"enc{m}.relu{k}")))
                cin = ch[m]
            self.encoder_modules.append(
                {"blocks": blocks, "pool": MaxPool(name=f"enc{m}.pool"),
                 "relu": ReLU(name=f"enc{m}.relu")}
            )

        self.decoder_modules = []
        for m in reversed(range(config.modules)):
            cout_last = ch[m - 1] if m > 0 else ch[0]
            blocks = []
            cin = ch[m]
            for k in range(config.convs_per_module):
                last = k == config.convs_per_module - 1
                cout = cout_last if last else ch[m]
                conv = Conv2D(cin, cout, 3, rng, dtype, name=f"dec{m}.conv{k}")
                bn = BatchNorm(cout, config.bn_epsilon, config.bn_momentum, dtype,
                               name=f"dec{m}.bn{k}")
                # the module-level ReLU already follows the last block
                blocks.append((conv, bn, None if last else block_relu(f"dec{m}.relu{k}")))
                cin = cout
            self.decoder_modules.append(
                {"hierarchy": m,
                 "unpool": MaxUnpool(self.encoder_modules[m]["pool"], name=f"dec{m}.unpool"),
                 "blocks": blocks, "relu": ReLU(name=f"dec{m}.relu")}
            )

        self.head = Conv2D(ch[0], config.num_classes, 1, rng, dtype, name="head.conv")
        self._order = None  # layer execution order built on first forward

    # -- execution -----------------------------------------------------------

    def _check(self, x, layer):
        if not np.all(np.isfinite(x)):
            raise NonFiniteActivationError(layer.name)
        return x

    def forward(self, batch: np.ndarray, train: bool = True):
        """Run the full network; returns (logits, probabilities).

        ``batch`` is NHWC float in [0, 1] with spatial dims divisible by
        2^modules. Layer execution order is recorded for backward.
        """
        x = np.asarray(batch, dtype=self.dtype)
        if x.ndim != 4 or x.shape[3] != self.config.in_channels:
            raise ValueError(f"expected NHWC batch with {self.config.in_channels} channels")
        div = 2 ** self.config.modules
        if x.shape[1] % div or x.shape[2] % div:
            raise ValueError(f"spatial dims must be divisible by {div}")

        order = []

        def run(layer, x):
            out = self._check(layer.forward(x, train=train), layer)
            order.append(layer)
            return out

        for mod in self.encoder_modules:
            for conv, bn, relu in mod["blocks"]:
                x = run(conv, x)
                x = run(bn, x)
                if relu is not None:
                    x = run(relu, x)
            x = run(mod["pool"], x)
            x = run(mod["relu"], x)
        for mod in self.decoder_modules:
            x = run(mod["unpool"], x)
            for conv, bn, relu in mod["blocks"]:
                x = run(conv, x)
                x = run(bn, x)
                if relu is not None:
                    x = run(relu, x)
            x = run(mod["relu"], x)
        logits = run(self.head, x)
        self._order = order
        probs = softmax(logits)
        return logits, probs

    def backward(self, dlogits: np.ndarray):
        """Backpropagate a gradient w.r.t. the logits through the recorded order."""
        if self._order is None:
            raise RuntimeError("backward called before forward")
        grad = dlogits
        for layer in reversed(self._order):
            grad = layer.backward(grad)
        return grad

    # -- parameter access ----------------------------------------------------

    def _all_layers(self):
        for mod in self.encoder_modules:
            for conv, bn, _ in mod["blocks"]:
                yield conv
                yield bn
        for mod in self.decoder_modules:
            for conv, bn, _ in mod["blocks"]:
                yield conv
                yield bn
        yield self.head

    def parameters(self):
        """Yield (name, param, grad) for every learnable tensor, fixed order."""
        for layer in self._all_layers():
            for key in sorted(layer.params):
                yield f"{layer.name}.{key}", layer.params[key], layer.grads[key]

    def state_tensors(self):
        """Learnable tensors plus batch-norm running stats, fixed order."""
        for layer in self._all_layers():
            for key in sorted(layer.params):
                yield f"{layer.name}.{key}", layer.params[key]
            if isinstance(layer, BatchNorm):
                yield f"{layer.name}.running_mean", layer.running_mean
                yield f"{layer.name}.running_var", layer.running_var

    def load_state(self, tensors):
        """Assign tensors produced by state_tensors(), by position."""
        own = list(self.state_tensors())
        if len(tensors) != len(own):
            raise ValueError(f"expected {len(own)} tensors, got {len(tensors)}")
        for (name, dst), src in zip(own, tensors):
            if dst.shape != src.shape:
                raise ValueError(f"shape mismatch for {name}: {dst.shape} vs {src.shape}")
            dst[...] = src

    def num_params(self) -> int:
        return sum(p.size for _, p, _ in self.parameters())
