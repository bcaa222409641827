"""Encoder/decoder segmentation network with pooling-index sharing, in pure numpy."""

from .model import SegNetConfig, SegNetModel, NonFiniteActivationError
from .layers import softmax, loss_and_grad, maxpool_indices, max_unpool
from .training import TrainConfig, train, train_step, predict_labelmap, pixel_accuracy
from .checkpoint import save_model, load_model

__all__ = [
    "SegNetConfig",
    "SegNetModel",
    "NonFiniteActivationError",
    "softmax",
    "loss_and_grad",
    "maxpool_indices",
    "max_unpool",
    "TrainConfig",
    "train",
    "train_step",
    "predict_labelmap",
    "pixel_accuracy",
    "save_model",
    "load_model",
]
