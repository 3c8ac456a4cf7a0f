"""The 12-layer CAS-CNN graph: encoder, decoder with skip concatenation, four output heads."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from fractions import Fraction
from typing import NamedTuple

import numpy as np

from .fileio import atomic_write_bytes
from .autograd import (
    ShapeError,
    Tensor,
    avg_pool_2x2,
    concat_channels,
    conv2d,
    prelu,
    transposed_conv2d,
    upsample_nearest_2x,
)

CHECKPOINT_MAGIC = b"CASC"
CHECKPOINT_VERSION = 1
PRELU_INIT = 0.25


@dataclass(frozen=True)
class LayerSpec:
    name: str
    kind: str  # "conv" or "fullconv"
    in_channels: int
    out_channels: int
    kernel: int
    stride: int

    @property
    def weight_shape(self) -> tuple[int, ...]:
        k = self.kernel
        if self.kind == "conv":
            return (self.out_channels, self.in_channels, k, k)
        return (self.in_channels, self.out_channels, k, k)

    @property
    def weight_count(self) -> int:
        return self.in_channels * self.out_channels * self.kernel * self.kernel


def layer_specs(width=1) -> list[LayerSpec]:
    """Per-layer hyperparameters; width scales every hidden channel count."""
    width = Fraction(width)
    c1, c2 = 128 * width, 256 * width
    if width <= 0 or c1.denominator != 1 or c2.denominator != 1:
        raise ValueError(f"width multiplier {width} does not give integer channel counts")
    lo, hi = int(c1), int(c2)

    def conv(name, cin, cout):
        return LayerSpec(name, "conv", cin, cout, 3, 1)

    def fullconv(name, cin, cout):
        return LayerSpec(name, "fullconv", cin, cout, 4, 2)

    return [
        conv("A1", 1, lo),
        conv("A2", lo, lo),
        conv("B1", lo, lo),
        conv("B2", lo, lo),
        # C1 widens 128 -> 256; the table lists the pair in the opposite order
        conv("C1", lo, hi),
        conv("C2", hi, hi),
        conv("D1", hi, hi),
        conv("D2", hi, hi),
        fullconv("Dtilde", hi, hi),
        conv("Dhat", hi, 1),
        fullconv("Ctilde", hi + hi + 1, lo),
        conv("Chat", hi + hi + 1, 1),
        fullconv("Btilde", lo + lo + 1, lo),
        conv("Bhat", lo + lo + 1, 1),
        conv("Ahat", lo + lo + 1, 1),
    ]


class MultiScaleOutput(NamedTuple):
    y_full: Tensor
    y_half: Tensor
    y_quarter: Tensor
    y_eighth: Tensor


class CasCnnModel:
    """Named parameter set plus the forward wiring.

    Parameters are stored as ``<layer>.weight``, ``<layer>.bias`` and
    ``<layer>.slope`` in layer order.
    """

    def __init__(self, width=1):
        self.width = Fraction(width)
        self.layers = layer_specs(self.width)
        self.params: dict[str, Tensor] = {}
        for spec in self.layers:
            self.params[f"{spec.name}.weight"] = Tensor(np.zeros(spec.weight_shape, np.float32), requires_grad=True)
            self.params[f"{spec.name}.bias"] = Tensor(np.zeros(spec.out_channels, np.float32), requires_grad=True)
            self.params[f"{spec.name}.slope"] = Tensor(np.full(spec.out_channels, PRELU_INIT, np.float32),
                                                       requires_grad=True)

    def __repr__(self) -> str:
        return f"CasCnnModel(width={self.width}, params={sum(p.size for p in self.params.values())})"

    def _layer(self, name: str, x: Tensor) -> Tensor:
        w = self.params[f"{name}.weight"]
        b = self.params[f"{name}.bias"]
        y = conv2d(x, w, b) if w.shape[2] == 3 else transposed_conv2d(x, w, b)
        return prelu(y, self.params[f"{name}.slope"])

    def forward(self, batch) -> MultiScaleOutput:
        x = batch if isinstance(batch, Tensor) else Tensor(np.asarray(batch, dtype=np.float32))
        if x.data.ndim != 4 or x.shape[1] != 1:
            raise ShapeError("forward", "expected a [N,1,H,W] luma batch", [x.shape])
        h, w = x.shape[2:]
        if h % 8 or w % 8:
            raise ShapeError("forward", "height and width must be multiples of 8; pad the input first",
                             [x.shape])
        L = self._layer
        a2 = L("A2", L("A1", x))
        b2 = L("B2", L("B1", avg_pool_2x2(a2)))
        c2 = L("C2", L("C1", avg_pool_2x2(b2)))
        d2 = L("D2", L("D1", avg_pool_2x2(c2)))

        y_eighth = L("Dhat", d2)
        cat_c = concat_channels([L("Dtilde", d2), c2, upsample_nearest_2x(y_eighth)])
        y_quarter = L("Chat", cat_c)
        cat_b = concat_channels([L("Ctilde", cat_c), b2, upsample_nearest_2x(y_quarter)])
        y_half = L("Bhat", cat_b)
        cat_a = concat_channels([L("Btilde", cat_b), a2, upsample_nearest_2x(y_half)])
        y_full = L("Ahat", cat_a)
        return MultiScaleOutput(y_full, y_half, y_quarter, y_eighth)

    __call__ = forward

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}


def build(width=1) -> CasCnnModel:
    return CasCnnModel(width)


def init_weights(model: CasCnnModel, seed: int) -> CasCnnModel:
    """Uniform init in (-1/sqrt(n_in), 1/sqrt(n_in)) for weights and biases; slopes 0.25."""
    rng = np.random.default_rng(seed)
    for spec in model.layers:
        bound = 1.0 / np.sqrt(spec.in_channels)
        w = model.params[f"{spec.name}.weight"]
        b = model.params[f"{spec.name}.bias"]
        w.data = rng.uniform(-bound, bound, size=w.shape).astype(np.float32)
        b.data = rng.uniform(-bound, bound, size=b.shape).astype(np.float32)
        model.params[f"{spec.name}.slope"].data = np.full(spec.out_channels, PRELU_INIT, np.float32)
    return model


@dataclass(frozen=True)
class LayerCount:
    name: str
    weights: int
    total: int  # weights + biases + PReLU slopes


def count_params(model: CasCnnModel) -> tuple[list[LayerCount], int, int]:
    """Per-layer counts plus (total weights, total weights+biases+slopes)."""
    rows = []
    for spec in model.layers:
        w = model.params[f"{spec.name}.weight"].size
        rest = model.params[f"{spec.name}.bias"].size + model.params[f"{spec.name}.slope"].size
        rows.append(LayerCount(spec.name, w, w + rest))
    return rows, sum(r.weights for r in rows), sum(r.total for r in rows)


# ---------------------------------------------------------------------------
# checkpoints

class CheckpointError(Exception):
    pass


class CheckpointFormatError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class CheckpointShapeError(CheckpointError):
    def __init__(self, name: str, expected, found):
        self.name = name
        super().__init__(f"parameter {name!r}: checkpoint has shape {tuple(found)}, model expects {tuple(expected)}")


def encode_checkpoint(tensors: dict[str, np.ndarray]) -> bytes:
    chunks = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(tensors))]
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(raw)) + raw)
        chunks.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(chunks)


def decode_checkpoint(blob: bytes) -> dict[str, np.ndarray]:
    pos = 0

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(blob):
            raise CheckpointTruncatedError(f"checkpoint ends at byte {len(blob)}, needed {pos + n}")
        chunk = blob[pos:pos + n]
        pos += n
        return chunk

    if take(4) != CHECKPOINT_MAGIC:
        raise CheckpointFormatError("not a CASC checkpoint (bad magic bytes)")
    version, count = struct.unpack("<II", take(8))
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(f"checkpoint format version {version}, expected {CHECKPOINT_VERSION}")
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        name = take(nlen).decode("utf-8")
        (rank,) = struct.unpack("<B", take(1))
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        n = int(np.prod(dims, dtype=np.int64))
        out[name] = np.frombuffer(take(4 * n), dtype="<f4").reshape(dims).astype(np.float32)
    if pos != len(blob):
        raise CheckpointFormatError(f"{len(blob) - pos} trailing bytes after last tensor")
    return out


def save_checkpoint(model: CasCnnModel, path) -> None:
    atomic_write_bytes(path, encode_checkpoint(model.state()))


def load_state(model: CasCnnModel, tensors: dict[str, np.ndarray]) -> CasCnnModel:
    """Copy decoded tensors into ``model`` after validating names and shapes."""
    for name, param in model.params.items():
        if name not in tensors:
            raise CheckpointFormatError(f"checkpoint lacks parameter {name!r}")
        if tensors[name].shape != param.shape:
            raise CheckpointShapeError(name, param.shape, tensors[name].shape)
    extra = set(tensors) - set(model.params)
    if extra:
        raise CheckpointFormatError(f"unknown parameters in checkpoint: {sorted(extra)}")
    for name, param in model.params.items():
        param.data = tensors[name].copy()
    return model


def load_checkpoint(path, width=None) -> CasCnnModel:
    """Read a checkpoint. With ``width`` given, the file must match that build."""
    with open(path, "rb") as fh:
        tensors = decode_checkpoint(fh.read())
    if width is None:
        if "A1.weight" not in tensors:
            raise CheckpointFormatError("checkpoint lacks parameter 'A1.weight'")
        width = Fraction(tensors["A1.weight"].shape[0], 128)
    return load_state(CasCnnModel(width), tensors)
