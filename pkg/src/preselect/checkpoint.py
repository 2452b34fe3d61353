"""Model checkpoint format.

Layout of a .ckpt file:

    magic  b"TPF1"
    u32    in_channels C, u32 hidden width, f32 standardization eps
    blobs  w1 (hidden x 2C), b1, w2 (2 x hidden), b2 as raw float32 LE
    u32    number of fusion levels, then per level in L2, L3, L4 order:
             u32 in_channels, u32 out_channels, W blob, b blob
"""

from __future__ import annotations

import struct

import numpy as np

from .episodes import FusionProjector
from .scorer import ScoreModel
from .tensor_ops import Level

MAGIC = b"TPF1"
_LEVELS = (Level.L2, Level.L3, Level.L4)


def _write_blob(f, arr: np.ndarray) -> None:
    f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def _read_blob(f, shape) -> np.ndarray:
    count = int(np.prod(shape))
    return (
        np.frombuffer(f.read(4 * count), dtype="<f4").reshape(shape).astype(np.float32)
    )


def save_checkpoint(path, model: ScoreModel, proj: FusionProjector) -> None:
    hidden = model.w1.shape[0]
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<IIf", model.in_channels, hidden, model.eps))
        _write_blob(f, model.w1)
        _write_blob(f, model.b1)
        _write_blob(f, model.w2)
        _write_blob(f, model.b2)
        f.write(struct.pack("<I", len(_LEVELS)))
        for lv in _LEVELS:
            w = proj.weights[lv]
            f.write(struct.pack("<II", w.shape[1], w.shape[0]))
            _write_blob(f, w)
            _write_blob(f, proj.biases[lv])


def load_checkpoint(path) -> tuple[ScoreModel, FusionProjector]:
    with open(path, "rb") as f:
        if f.read(4) != MAGIC:
            raise ValueError(f"{path}: not a checkpoint (bad magic)")
        c, hidden, eps = struct.unpack("<IIf", f.read(12))
        model = ScoreModel(
            w1=_read_blob(f, (hidden, 2 * c)),
            b1=_read_blob(f, (hidden,)),
            w2=_read_blob(f, (2, hidden)),
            b2=_read_blob(f, (2,)),
            eps=float(eps),
        )
        (n_levels,) = struct.unpack("<I", f.read(4))
        if n_levels != len(_LEVELS):
            raise ValueError(f"unexpected level count {n_levels}")
        weights, biases = {}, {}
        for lv in _LEVELS:
            c_in, c_out = struct.unpack("<II", f.read(8))
            weights[lv] = _read_blob(f, (c_out, c_in))
            biases[lv] = _read_blob(f, (c_out,))
    return model, FusionProjector(weights, biases)
