"""Small numpy neural-network engine: layered parameters, forward/backward over layer ranges, SGD.

Everything is float64. A model is an immutable sequence of layers, each owning one flat
parameter block (weights then bias). Forward over ``[start, stop)`` returns a tape that
``backward`` over the same range consumes; backward yields parameter gradients for the range
plus the gradient w.r.t. the range input, so running ``[c, L)`` then ``[0, c)`` is the same
computation as ``[0, L)``.
"""

from __future__ import annotations

import itertools
import json
import struct
from dataclasses import dataclass, field
from math import prod, sqrt
from pathlib import Path
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DENSE = "dense"
CONV2D = "conv2d"
MAXPOOL2D = "maxpool2d"
RELU = "relu"
FLATTEN = "flatten"
KINDS = (DENSE, CONV2D, MAXPOOL2D, RELU, FLATTEN)

CHECKPOINT_MAGIC = b"PHSFL1"


class ShapeError(ValueError):
    """Input does not match the shape a layer expects."""

    def __init__(self, layer: int, expected, got):
        super().__init__(f"layer {layer}: expected input shape {tuple(expected)}, got {tuple(got)}")
        self.layer = layer


class TapeError(ValueError):
    pass


class NonFiniteGradient(ValueError):
    def __init__(self, layer: int):
        super().__init__(f"non-finite gradient in layer {layer}")
        self.layer = layer


@dataclass(frozen=True)
class LayerSpec:
    """One layer with its per-sample input/output shapes resolved."""

    kind: str
    in_shape: tuple[int, ...]
    out_shape: tuple[int, ...]
    out_features: int = 0  # dense units / conv output channels
    kernel: int = 0
    stride: int = 1
    pad: int = 0

    @property
    def weight_shape(self) -> tuple[int, ...]:
        if self.kind == DENSE:
            return (self.out_features, self.in_shape[0])
        if self.kind == CONV2D:
            return (self.out_features, self.in_shape[0], self.kernel, self.kernel)
        return (0,)

    @property
    def fan_in(self) -> int:
        if self.kind == DENSE:
            return self.in_shape[0]
        if self.kind == CONV2D:
            return self.in_shape[0] * self.kernel * self.kernel
        return 0

    @property
    def num_params(self) -> int:
        if self.kind in (DENSE, CONV2D):
            return prod(self.weight_shape) + self.out_features
        return 0

    def to_dict(self) -> dict:
        d = {"kind": self.kind, "in_shape": list(self.in_shape), "out_shape": list(self.out_shape)}
        if self.kind in (DENSE, CONV2D):
            d["out_features"] = self.out_features
        if self.kind == CONV2D:
            d.update(kernel=self.kernel, stride=self.stride, pad=self.pad)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "LayerSpec":
        return cls(
            kind=d["kind"],
            in_shape=tuple(d["in_shape"]),
            out_shape=tuple(d["out_shape"]),
            out_features=d.get("out_features", 0),
            kernel=d.get("kernel", 0),
            stride=d.get("stride", 1),
            pad=d.get("pad", 0),
        )


# Layer builders: each returns a function of the input shape, so a stack can be laid out
# without repeating shapes by hand.

def dense(out_features: int):
    def build(in_shape):
        if len(in_shape) != 1:
            raise ValueError(f"dense expects a flat input, got shape {in_shape}")
        return LayerSpec(DENSE, tuple(in_shape), (out_features,), out_features=out_features)
    return build


def conv2d(out_channels: int, kernel: int = 5, stride: int = 1, pad: int = 0):
    def build(in_shape):
        if len(in_shape) != 3:
            raise ValueError(f"conv2d expects (C, H, W), got {in_shape}")
        c, h, w = in_shape
        ho = (h + 2 * pad - kernel) // stride + 1
        wo = (w + 2 * pad - kernel) // stride + 1
        if ho < 1 or wo < 1:
            raise ValueError(f"conv2d kernel {kernel} does not fit input {in_shape} with pad {pad}")
        return LayerSpec(CONV2D, tuple(in_shape), (out_channels, ho, wo),
                         out_features=out_channels, kernel=kernel, stride=stride, pad=pad)
    return build


def maxpool2d():
    def build(in_shape):
        c, h, w = in_shape
        if h < 2 or w < 2:
            raise ValueError(f"maxpool2d needs at least 2x2 planes, got {in_shape}")
        return LayerSpec(MAXPOOL2D, tuple(in_shape), (c, h // 2, w // 2))
    return build


def relu():
    return lambda in_shape: LayerSpec(RELU, tuple(in_shape), tuple(in_shape))


def flatten():
    return lambda in_shape: LayerSpec(FLATTEN, tuple(in_shape), (prod(in_shape),))


def stack(input_shape: Sequence[int], builders) -> tuple[LayerSpec, ...]:
    layers = []
    shape = tuple(input_shape)
    for build in builders:
        layer = build(shape)
        layers.append(layer)
        shape = layer.out_shape
    return tuple(layers)


def standard_cnn(in_channels: int = 3, num_classes: int = 10, image_size: int = 32,
              channels: tuple[int, int] = (64, 128), hidden: int = 256,
              kernel: int = 5, pad: int = 0) -> tuple[LayerSpec, ...]:
    """Conv -> ReLU -> Pool -> Conv -> ReLU -> Pool -> FC -> ReLU -> FC.

    With the defaults on 3x32x32 inputs the first FC is FC(512, 256).
    """
    return stack((in_channels, image_size, image_size), [
        conv2d(channels[0], kernel, pad=pad), relu(), maxpool2d(),
        conv2d(channels[1], kernel, pad=pad), relu(), maxpool2d(),
        flatten(), dense(hidden), relu(), dense(num_classes),
    ])


_model_tokens = itertools.count(1)


class LayeredModel:
    """Immutable list of layers plus one flat float64 parameter block per layer."""

    def __init__(self, layers: Sequence[LayerSpec], blocks: Sequence[np.ndarray]):
        layers = tuple(layers)
        if len(layers) != len(blocks):
            raise ValueError("one parameter block per layer required")
        for i in range(len(layers) - 1):
            if layers[i].out_shape != layers[i + 1].in_shape:
                raise ShapeError(i + 1, layers[i].out_shape, layers[i + 1].in_shape)
        frozen = []
        for i, (layer, block) in enumerate(zip(layers, blocks)):
            arr = np.array(block, dtype=np.float64, copy=True).reshape(-1)
            if arr.size != layer.num_params:
                raise ValueError(f"layer {i}: expected {layer.num_params} params, got {arr.size}")
            arr.flags.writeable = False
            frozen.append(arr)
        self.layers = layers
        self.blocks = tuple(frozen)
        # identifies this exact parameter state; tapes are bound to it
        self.token = next(_model_tokens)

    def __len__(self) -> int:
        return len(self.layers)

    @property
    def input_shape(self) -> tuple[int, ...]:
        return self.layers[0].in_shape

    @property
    def output_shape(self) -> tuple[int, ...]:
        return self.layers[-1].out_shape

    @property
    def total_params(self) -> int:
        return sum(layer.num_params for layer in self.layers)

    def flat(self) -> np.ndarray:
        return np.concatenate(self.blocks) if self.blocks else np.zeros(0)

    def weights(self, i: int) -> tuple[np.ndarray, np.ndarray]:
        layer = self.layers[i]
        nw = prod(layer.weight_shape)
        block = self.blocks[i]
        return block[:nw].reshape(layer.weight_shape), block[nw:]

    def sub(self, start: int, stop: int) -> "LayeredModel":
        if not 0 <= start < stop <= len(self):
            raise ValueError(f"invalid layer range [{start}, {stop}) for {len(self)} layers")
        return LayeredModel(self.layers[start:stop], self.blocks[start:stop])

    def replace_blocks(self, blocks: Sequence[np.ndarray]) -> "LayeredModel":
        return LayeredModel(self.layers, blocks)

    def equals(self, other: "LayeredModel") -> bool:
        """Bitwise equality of layers and parameters."""
        return self.layers == other.layers and all(
            a.tobytes() == b.tobytes() for a, b in zip(self.blocks, other.blocks))


def concat(*parts: LayeredModel) -> LayeredModel:
    layers = tuple(itertools.chain.from_iterable(p.layers for p in parts))
    blocks = tuple(itertools.chain.from_iterable(p.blocks for p in parts))
    return LayeredModel(layers, blocks)


def init_model(layers: Sequence[LayerSpec], seed: int) -> LayeredModel:
    """Fan-in uniform init: weights U(+-sqrt(6/fan_in)), biases U(+-1/sqrt(fan_in))."""
    rng = np.random.default_rng(seed)
    blocks = []
    for layer in layers:
        if layer.num_params == 0:
            blocks.append(np.zeros(0))
            continue
        w_bound = sqrt(6.0 / layer.fan_in)
        b_bound = 1.0 / sqrt(layer.fan_in)
        w = rng.uniform(-w_bound, w_bound, size=prod(layer.weight_shape))
        b = rng.uniform(-b_bound, b_bound, size=layer.out_features)
        blocks.append(np.concatenate([w, b]))
    return LayeredModel(layers, blocks)


# --- per-layer kernels -------------------------------------------------------------------

def _conv_windows(layer: LayerSpec, x: np.ndarray) -> np.ndarray:
    p = layer.pad
    if p:
        x = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    win = sliding_window_view(x, (layer.kernel, layer.kernel), axis=(2, 3))
    if layer.stride > 1:
        win = win[:, :, ::layer.stride, ::layer.stride]
    return win  # (N, C, Ho, Wo, k, k)


def _layer_forward(layer: LayerSpec, w, b, x):
    kind = layer.kind
    if kind == DENSE:
        return x @ w.T + b, x
    if kind == CONV2D:
        win = _conv_windows(layer, x)
        out = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3]))  # (N, Ho, Wo, O)
        out = out.transpose(0, 3, 1, 2) + b[None, :, None, None]
        return np.ascontiguousarray(out), win
    if kind == MAXPOOL2D:
        n, c, h, wd = x.shape
        ho, wo = layer.out_shape[1], layer.out_shape[2]
        cells = x[:, :, :2 * ho, :2 * wo].reshape(n, c, ho, 2, wo, 2)
        cells = cells.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, 4)
        arg = cells.argmax(axis=-1)  # ties go to the first element of the window
        out = np.take_along_axis(cells, arg[..., None], axis=-1)[..., 0]
        return out, arg
    if kind == RELU:
        mask = x > 0
        return x * mask, mask
    if kind == FLATTEN:
        return x.reshape(x.shape[0], -1), None
    raise ValueError(f"unknown layer kind {kind!r}")


def _layer_backward(layer: LayerSpec, w, cache, dy):
    """Returns (flat parameter gradient, input gradient)."""
    kind = layer.kind
    if kind == DENSE:
        x = cache
        dw = dy.T @ x
        db = dy.sum(axis=0)
        return np.concatenate([dw.reshape(-1), db]), dy @ w
    if kind == CONV2D:
        win = cache
        n, c, ho, wo, k, _ = win.shape
        dw = np.tensordot(dy, win, axes=([0, 2, 3], [0, 2, 3]))  # (O, C, k, k)
        db = dy.sum(axis=(0, 2, 3))
        dcols = np.tensordot(dy, w, axes=([1], [0]))  # (N, Ho, Wo, C, k, k)
        dcols = dcols.transpose(0, 3, 1, 2, 4, 5)
        p, s = layer.pad, layer.stride
        h, wd = layer.in_shape[1] + 2 * p, layer.in_shape[2] + 2 * p
        dxp = np.zeros((n, c, h, wd))
        for i in range(k):
            for j in range(k):
                dxp[:, :, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s] += dcols[..., i, j]
        dx = dxp[:, :, p:h - p, p:wd - p] if p else dxp
        return np.concatenate([dw.reshape(-1), db]), np.ascontiguousarray(dx)
    if kind == MAXPOOL2D:
        arg = cache
        n, c, ho, wo = arg.shape
        cells = np.zeros((n, c, ho, wo, 4))
        np.put_along_axis(cells, arg[..., None], dy[..., None], axis=-1)
        cells = cells.reshape(n, c, ho, wo, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, 2 * ho, 2 * wo)
        dx = np.zeros((n,) + layer.in_shape)
        dx[:, :, :2 * ho, :2 * wo] = cells
        return np.zeros(0), dx
    if kind == RELU:
        return np.zeros(0), dy * cache
    if kind == FLATTEN:
        return np.zeros(0), dy.reshape((dy.shape[0],) + layer.in_shape)
    raise ValueError(f"unknown layer kind {kind!r}")


# --- range forward / backward -----------------------------------------------------------

@dataclass
class Tape:
    token: int
    start: int
    stop: int
    input_shape: tuple[int, ...]
    caches: list = field(default_factory=list)


@dataclass
class GradientSet:
    """Parameter gradients for layers ``start .. start+len(blocks)`` plus the input gradient."""

    start: int
    blocks: tuple[np.ndarray, ...]
    input_grad: np.ndarray

    @property
    def stop(self) -> int:
        return self.start + len(self.blocks)

    def flat(self) -> np.ndarray:
        return np.concatenate(self.blocks) if self.blocks else np.zeros(0)


def _check_range(model: LayeredModel, start: int, stop: int | None) -> int:
    stop = len(model) if stop is None else stop
    if not 0 <= start < stop <= len(model):
        raise ValueError(f"invalid layer range [{start}, {stop}) for {len(model)} layers")
    return stop


def forward(model: LayeredModel, x: np.ndarray, start: int = 0, stop: int | None = None):
    """Run layers ``[start, stop)`` on a batch; returns ``(output, tape)``."""
    stop = _check_range(model, start, stop)
    x = np.asarray(x, dtype=np.float64)
    expected = model.layers[start].in_shape
    if x.ndim != len(expected) + 1 or x.shape[1:] != expected:
        raise ShapeError(start, (x.shape[0] if x.ndim else 0,) + expected, x.shape)
    tape = Tape(model.token, start, stop, x.shape)
    for i in range(start, stop):
        w, b = model.weights(i)
        x, cache = _layer_forward(model.layers[i], w, b, x)
        tape.caches.append(cache)
    return x, tape


def backward(model: LayeredModel, tape: Tape, upstream: np.ndarray,
             start: int = 0, stop: int | None = None) -> GradientSet:
    stop = _check_range(model, start, stop)
    if tape.token != model.token or tape.start != start or tape.stop != stop:
        raise TapeError("tape was not produced by a forward pass of this model over this range")
    dy = np.asarray(upstream, dtype=np.float64)
    grads = [None] * (stop - start)
    for i in range(stop - 1, start - 1, -1):
        w, _ = model.weights(i)
        grads[i - start], dy = _layer_backward(model.layers[i], w, tape.caches[i - start], dy)
    return GradientSet(start, tuple(grads), dy)


def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> float:
    """Mean over the batch of -log softmax(logits)[label]."""
    return cross_entropy_with_grad(logits, labels)[0]


def cross_entropy_with_grad(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    n, c = logits.shape
    if labels.shape != (n,):
        raise ValueError("one label per row required")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ValueError(f"label out of range [0, {c})")
    if not np.all(np.isfinite(logits)):
        raise ValueError("non-finite logits")
    shifted = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(n)
    loss = float(np.mean(lse - shifted[rows, labels]))
    probs = np.exp(shifted - lse[:, None])
    probs[rows, labels] -= 1.0
    return loss, probs / n


def sgd_step(model: LayeredModel, grads: GradientSet, lr: float,
             freeze: Sequence[bool] | None = None) -> LayeredModel:
    """``block - lr * grad`` for every unfrozen layer covered by ``grads``; others untouched."""
    if grads.stop > len(model):
        raise ValueError("gradient set does not fit the model")
    freeze = [False] * len(model) if freeze is None else list(freeze)
    if len(freeze) != len(model):
        raise ValueError("freeze mask needs one entry per layer")
    blocks = list(model.blocks)
    for k, g in enumerate(grads.blocks):
        i = grads.start + k
        if g.shape != blocks[i].shape:
            raise ValueError(f"layer {i}: gradient shape {g.shape} != block shape {blocks[i].shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(i)
        if freeze[i] or lr == 0 or g.size == 0:
            continue
        blocks[i] = blocks[i] - lr * g
    return model.replace_blocks(blocks)


def loss_and_grads(model: LayeredModel, x: np.ndarray, labels: np.ndarray):
    """Monolithic pass: ``(loss, GradientSet, logits)`` over the whole model."""
    logits, tape = forward(model, x)
    loss, dlogits = cross_entropy_with_grad(logits, labels)
    return loss, backward(model, tape, dlogits), logits


def predict(model: LayeredModel, x: np.ndarray, chunk: int = 512) -> np.ndarray:
    outs = [forward(model, x[i:i + chunk])[0] for i in range(0, len(x), chunk)]
    return np.concatenate(outs) if outs else np.zeros((0,) + model.output_shape)


# --- checkpoint file --------------------------------------------------------------------
# layout: b"PHSFL1" | u32 header length | JSON layer specs | Z little-endian float64

def model_to_bytes(model: LayeredModel) -> bytes:
    header = json.dumps([layer.to_dict() for layer in model.layers]).encode()
    body = model.flat().astype("<f8").tobytes()
    return CHECKPOINT_MAGIC + struct.pack("<I", len(header)) + header + body


def model_from_bytes(data: bytes) -> LayeredModel:
    if data[:6] != CHECKPOINT_MAGIC:
        raise ValueError("bad checkpoint magic at offset 0")
    if len(data) < 10:
        raise ValueError("truncated checkpoint header at offset 6")
    (hlen,) = struct.unpack_from("<I", data, 6)
    if len(data) < 10 + hlen:
        raise ValueError(f"truncated checkpoint header at offset 10")
    layers = tuple(LayerSpec.from_dict(d) for d in json.loads(data[10:10 + hlen]))
    total = sum(layer.num_params for layer in layers)
    body = data[10 + hlen:]
    if len(body) != 8 * total:
        raise ValueError(f"checkpoint body at offset {10 + hlen}: expected {8 * total} bytes, got {len(body)}")
    flat = np.frombuffer(body, dtype="<f8").astype(np.float64)
    blocks, pos = [], 0
    for layer in layers:
        blocks.append(flat[pos:pos + layer.num_params])
        pos += layer.num_params
    return LayeredModel(layers, blocks)


def save_model(model: LayeredModel, path) -> None:
    Path(path).write_bytes(model_to_bytes(model))


def load_model(path) -> LayeredModel:
    return model_from_bytes(Path(path).read_bytes())
