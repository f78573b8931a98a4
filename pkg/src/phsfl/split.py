"""Split-learning protocol pieces: partition a model at the cut layer and run one split SGD step.

The client holds layers ``[0, cut_after)``; the edge server holds the body
``[cut_after, head_start)`` and the head ``[head_start, L)``. A step is

    client_forward -> server_step (forward, loss, backward, body update) -> client_step

with the cut-layer activation going up and its gradient coming back down.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from math import prod

import numpy as np

from . import nn
from .nn import LayeredModel


@dataclass(frozen=True)
class PartitionSpec:
    cut_after: int
    head_start: int

    def validate(self, model: LayeredModel) -> None:
        n = len(model)
        if not 1 <= self.cut_after < self.head_start <= n:
            raise ValueError(
                f"need 1 <= cut_after ({self.cut_after}) < head_start ({self.head_start}) <= {n}")
        if model.layers[self.head_start].num_params == 0:
            raise ValueError(f"head layer {self.head_start} ({model.layers[self.head_start].kind}) has no parameters")

    @classmethod
    def last_layer_head(cls, model_or_layers, cut_after: int) -> "PartitionSpec":
        layers = getattr(model_or_layers, "layers", model_or_layers)
        return cls(cut_after, len(layers) - 1)


def split(model: LayeredModel, spec: PartitionSpec):
    """Returns ``(client_part, server_body, server_head)``."""
    spec.validate(model)
    return (model.sub(0, spec.cut_after),
            model.sub(spec.cut_after, spec.head_start),
            model.sub(spec.head_start, len(model)))


def assemble(*parts: LayeredModel) -> LayeredModel:
    return nn.concat(*parts)


def server_part(model: LayeredModel, spec: PartitionSpec) -> LayeredModel:
    spec.validate(model)
    return model.sub(spec.cut_after, len(model))


def client_part(model: LayeredModel, spec: PartitionSpec) -> LayeredModel:
    spec.validate(model)
    return model.sub(0, spec.cut_after)


_pair_ids = itertools.count(1)


@dataclass
class CutActivation:
    values: np.ndarray
    sample_indices: np.ndarray
    tape: nn.Tape
    pair_id: int

    @property
    def width(self) -> int:
        return prod(self.values.shape[1:])

    @property
    def batch_size(self) -> int:
        return self.values.shape[0]

    def to_bytes(self) -> bytes:
        return self.values.astype("<f8").tobytes()


@dataclass
class CutGradient:
    values: np.ndarray
    pair_id: int

    @property
    def width(self) -> int:
        return prod(self.values.shape[1:])

    def to_bytes(self) -> bytes:
        return self.values.astype("<f8").tobytes()


class LabelStore:
    """Labels held by the edge server, looked up by global sample index."""

    def __init__(self, indices, labels):
        self._labels = dict(zip(np.asarray(indices).tolist(), np.asarray(labels).tolist()))

    def lookup(self, indices) -> np.ndarray:
        try:
            return np.array([self._labels[i] for i in np.asarray(indices).tolist()], dtype=np.int64)
        except KeyError as e:
            raise KeyError(f"sample index {e.args[0]} not in the edge server's label store") from None

    def __len__(self) -> int:
        return len(self._labels)


def client_forward(client: LayeredModel, features: np.ndarray, sample_indices) -> CutActivation:
    sample_indices = np.asarray(sample_indices)
    if len(sample_indices) != len(features):
        raise ValueError("one sample index per feature row required")
    out, tape = nn.forward(client, features)
    return CutActivation(out, sample_indices, tape, next(_pair_ids))


def server_forward_backward(server: LayeredModel, act: CutActivation, labels: np.ndarray):
    """Loss, parameter gradients of the server part, and the cut-layer gradient."""
    logits, tape = nn.forward(server, act.values)
    loss, dlogits = nn.cross_entropy_with_grad(logits, labels)
    grads = nn.backward(server, tape, dlogits)
    return loss, grads, CutGradient(grads.input_grad, act.pair_id)


def server_step(server: LayeredModel, act: CutActivation, labels: LabelStore, lr: float,
                head_frozen: bool = True, head_layers: int = 1):
    """One server-side SGD step on the body (and head unless frozen).

    ``server`` is body followed by head; the last ``head_layers`` layers are the head.
    Returns ``(loss, updated server part, CutGradient)``.
    """
    y = labels.lookup(act.sample_indices)
    loss, grads, cut_grad = server_forward_backward(server, act, y)
    freeze = [False] * len(server)
    if head_frozen:
        for i in range(len(server) - head_layers, len(server)):
            freeze[i] = True
    return loss, nn.sgd_step(server, grads, lr, freeze), cut_grad


def client_step(client: LayeredModel, act: CutActivation, cut_grad: CutGradient, lr: float) -> LayeredModel:
    if cut_grad.pair_id != act.pair_id:
        raise ValueError("cut gradient does not belong to this activation")
    if cut_grad.values.shape != act.values.shape:
        raise ValueError("cut gradient shape differs from the activation")
    grads = nn.backward(client, act.tape, cut_grad.values)
    return nn.sgd_step(client, grads, lr)
