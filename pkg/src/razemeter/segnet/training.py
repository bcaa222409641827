"""SGD training loop, accuracy metrics, and whole-tile inference."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from ..raster import GeoTile, to_patches, stitch_patches
from .layers import loss_and_grad, softmax
from .model import SegNetModel


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.01
    momentum: float = 0.9
    batch_size: int = 4
    epochs: int = 30
    seed: int = 0
    val_fraction: float = 0.2
    # stop as soon as held-out pixel accuracy reaches this, if set
    target_accuracy: Optional[float] = None

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ValueError("val_fraction must be in [0, 1)")


class SgdState:
    """Momentum buffers keyed by parameter name."""

    def __init__(self):
        self.velocity: dict[str, np.ndarray] = {}

    def step(self, model: SegNetModel, lr: float, momentum: float):
        for name, param, grad in model.parameters():
            v = self.velocity.get(name)
            if v is None:
                v = np.zeros_like(param)
                self.velocity[name] = v
            v *= momentum
            v -= lr * grad
            param += v


def train_step(model: SegNetModel, batch, labels, config: TrainConfig,
               state: Optional[SgdState] = None):
    """One forward/backward/update pass; returns (state, loss)."""
    if state is None:
        state = SgdState()
    logits, probs = model.forward(batch, train=True)
    loss, dlogits = loss_and_grad(probs, labels)
    if not np.isfinite(loss):
        raise FloatingPointError(f"non-finite training loss: {loss}")
    model.backward(dlogits.astype(model.dtype))
    state.step(model, config.learning_rate, config.momentum)
    return state, loss


def pixel_accuracy(predicted: np.ndarray, labels: np.ndarray) -> float:
    predicted = np.asarray(predicted)
    labels = np.asarray(labels)
    return float((predicted == labels).sum() / labels.size)


def per_class_accuracy(predicted: np.ndarray, labels: np.ndarray, num_classes: int):
    """Recall per class; NaN for classes absent from the labels."""
    out = []
    for c in range(num_classes):
        mask = labels == c
        out.append(float((predicted[mask] == c).mean()) if mask.any() else float("nan"))
    return out


def _predict_batch(model: SegNetModel, batch: np.ndarray) -> np.ndarray:
    _, probs = model.forward(batch, train=False)
    return probs.argmax(axis=-1).astype(np.uint8)


def evaluate(model: SegNetModel, images: np.ndarray, labels: np.ndarray,
             batch_size: int = 4):
    """Held-out pixel accuracy and per-class accuracy."""
    preds = []
    for i in range(0, len(images), batch_size):
        preds.append(_predict_batch(model, images[i:i + batch_size]))
    pred = np.concatenate(preds, axis=0)
    return (
        pixel_accuracy(pred, labels),
        per_class_accuracy(pred, labels, model.config.num_classes),
    )


def train(model: SegNetModel, images, labels, config: TrainConfig = TrainConfig()):
    """Train on (image, label map) pairs with a seeded held-out split.

    ``images`` is (n, h, w, 3) float in [0, 1]; ``labels`` is (n, h, w) class
    ids. Returns per-epoch metric dicts. epochs == 0 leaves the model
    untouched and returns no metrics.
    """
    images = np.asarray(images)
    labels = np.asarray(labels)
    if len(images) == 0:
        raise ValueError("dataset must be nonempty")
    rng = np.random.default_rng(config.seed)
    perm = rng.permutation(len(images))
    n_val = int(round(config.val_fraction * len(images)))
    val_idx, train_idx = perm[:n_val], perm[n_val:]
    if len(train_idx) == 0:
        raise ValueError("no training samples after validation split")

    state = SgdState()
    metrics = []
    for epoch in range(config.epochs):
        order = rng.permutation(train_idx)
        losses = []
        for i in range(0, len(order), config.batch_size):
            batch_idx = order[i:i + config.batch_size]
            state, loss = train_step(
                model, images[batch_idx], labels[batch_idx], config, state
            )
            losses.append(loss)
        if len(val_idx) > 0:
            acc, class_acc = evaluate(model, images[val_idx], labels[val_idx],
                                      config.batch_size)
        else:
            acc, class_acc = float("nan"), []
        metrics.append({
            "epoch": epoch,
            "mean_loss": float(np.mean(losses)),
            "pixel_accuracy": acc,
            "per_class_accuracy": class_acc,
        })
        if config.target_accuracy is not None and acc >= config.target_accuracy:
            break
    return metrics


def predict_labelmap(model: SegNetModel, tile: GeoTile, patch_size: int = 256) -> np.ndarray:
    """Per-pixel class map for a whole tile via patching and stitching.

    Ties in the per-pixel argmax resolve to the lowest class index.
    """
    grid = to_patches(tile, patch_size)
    results = []
    for _, _, patch in grid.patches:
        batch = patch.astype(model.dtype)[None] / 255.0
        results.append(_predict_batch(model, batch)[0])
    return stitch_patches(grid, results)
