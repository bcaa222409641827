"""Binary model checkpoints.

Layout (little-endian):
  magic "SGNT", version u32,
  modules u32, convs_per_module u32, num_classes u32, in_channels u32,
  relu_per_conv u8, bn_epsilon f64, bn_momentum f64,
  channel count u32 then each channel width u32,
  tensor count u32, then per tensor: ndim u32, dims u32..., raw f32 data.
Tensors appear in the fixed order of SegNetModel.state_tensors().
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .model import SegNetConfig, SegNetModel

MAGIC = b"SGNT"
VERSION = 1


class CheckpointError(ValueError):
    """Checkpoint file is malformed or incompatible."""


def save_model(model: SegNetModel, path: Path | str) -> None:
    cfg = model.config
    tensors = list(model.state_tensors())
    parts = [
        MAGIC,
        struct.pack("<I", VERSION),
        struct.pack("<IIII", cfg.modules, cfg.convs_per_module, cfg.num_classes,
                    cfg.in_channels),
        struct.pack("<Bdd", int(cfg.relu_per_conv), cfg.bn_epsilon, cfg.bn_momentum),
        struct.pack("<I", len(cfg.channels)),
        struct.pack(f"<{len(cfg.channels)}I", *cfg.channels),
        struct.pack("<I", len(tensors)),
    ]
    for _, arr in tensors:
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_model(path: Path | str, dtype=np.float32) -> SegNetModel:
    data = Path(path).read_bytes()
    off = 0

    def take(fmt):
        nonlocal off
        size = struct.calcsize(fmt)
        if off + size > len(data):
            raise CheckpointError("truncated checkpoint")
        vals = struct.unpack_from(fmt, data, off)
        off += size
        return vals

    if data[:4] != MAGIC:
        raise CheckpointError("bad magic; not a model checkpoint")
    off = 4
    (version,) = take("<I")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    modules, convs, num_classes, in_channels = take("<IIII")
    relu_per_conv, bn_eps, bn_mom = take("<Bdd")
    (n_ch,) = take("<I")
    channels = take(f"<{n_ch}I")
    cfg = SegNetConfig(
        modules=modules, convs_per_module=convs, channels=tuple(channels),
        num_classes=num_classes, in_channels=in_channels,
        relu_per_conv=bool(relu_per_conv), bn_epsilon=bn_eps, bn_momentum=bn_mom,
    )
    (n_tensors,) = take("<I")
    tensors = []
    for _ in range(n_tensors):
        (ndim,) = take("<I")
        shape = take(f"<{ndim}I")
        count = int(np.prod(shape, dtype=np.int64)) if ndim else 1
        nbytes = count * 4
        if off + nbytes > len(data):
            raise CheckpointError("truncated tensor data")
        arr = np.frombuffer(data, dtype="<f4", count=count, offset=off).reshape(shape)
        off += nbytes
        tensors.append(arr.astype(dtype))
    model = SegNetModel(cfg, seed=0, dtype=dtype)
    model.load_state(tensors)
    return model
