"""Per-client classifier fine-tuning and evaluation of generalized vs personalized models."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from . import nn
from .data import ClientShard, Dataset, make_batch, sample_minibatch
from .nn import LayeredModel
from .split import PartitionSpec, assemble, client_forward, split


@dataclass
class PersonalizedModel:
    client: LayeredModel
    body: LayeredModel
    head: LayeredModel
    owner: int

    @property
    def model(self) -> LayeredModel:
        return assemble(self.client, self.body, self.head)


def fine_tune_head(model: LayeredModel, spec: PartitionSpec, dataset: Dataset, shard: ClientShard,
                   steps: int = 10, lr: float = 0.01, seed: int = 0,
                   full_batch_max: int = 256, batch_size: int = 32) -> PersonalizedModel:
    """``steps`` SGD steps on the head only, using the client's training samples.

    Client and body stay exactly as in ``model``; their forward passes are recomputed
    every step. Shards with at most ``full_batch_max`` training samples use the full set
    per step, larger ones draw ``batch_size`` samples.
    """
    if steps < 0:
        raise ValueError("steps must be >= 0")
    if shard.num_train == 0:
        raise ValueError(f"client {shard.client_id} has no training samples")
    if steps > 0 and lr <= 0:
        raise ValueError("fine-tuning learning rate must be > 0")
    client, body, head = split(model, spec)
    rng = np.random.default_rng([seed, shard.client_id])
    full = shard.num_train <= full_batch_max
    for _ in range(steps):
        if full:
            batch = make_batch(dataset, shard.train_indices)
        else:
            batch = sample_minibatch(dataset, shard.train_indices, batch_size, rng)
        act = client_forward(client, batch.features, batch.sample_indices)
        feats, _ = nn.forward(body, act.values)
        logits, tape = nn.forward(head, feats)
        _, dlogits = nn.cross_entropy_with_grad(logits, batch.labels)
        head = nn.sgd_step(head, nn.backward(head, tape, dlogits), lr)
    return PersonalizedModel(client, body, head, shard.client_id)


def evaluate(model: LayeredModel, dataset: Dataset, indices) -> tuple[float, float]:
    """Accuracy (argmax, ties to the lowest class) and mean cross-entropy on ``indices``."""
    indices = np.asarray(indices, dtype=np.int64)
    if len(indices) == 0:
        raise ValueError("cannot evaluate on an empty split")
    logits = nn.predict(model, dataset.features[indices].astype(np.float64))
    labels = dataset.labels[indices]
    acc = float(np.mean(np.argmax(logits, axis=1) == labels))
    return acc, nn.cross_entropy(logits, labels)


@dataclass
class EvalReport:
    accuracies: np.ndarray
    losses: np.ndarray

    @property
    def mean_acc(self) -> float:
        return float(np.mean(self.accuracies))

    @property
    def std_acc(self) -> float:
        return float(np.std(self.accuracies))

    @property
    def min_acc(self) -> float:
        return float(np.min(self.accuracies))

    @property
    def max_acc(self) -> float:
        return float(np.max(self.accuracies))

    @property
    def mean_loss(self) -> float:
        return float(np.mean(self.losses))

    @property
    def std_loss(self) -> float:
        return float(np.std(self.losses))


def report(evals) -> EvalReport:
    """Aggregate per-client ``(accuracy, loss)`` pairs; std is the population std."""
    evals = list(evals)
    if not evals:
        raise ValueError("need at least one client")
    acc, loss = zip(*evals)
    return EvalReport(np.array(acc, dtype=np.float64), np.array(loss, dtype=np.float64))


@dataclass
class PersonalizationRow:
    client_id: int
    generalized_acc: float
    personalized_acc: float
    generalized_loss: float
    personalized_loss: float


def personalize_all(model: LayeredModel, spec: PartitionSpec, dataset: Dataset, shards,
                    steps: int = 10, lr: float = 0.01, seed: int = 0) -> list[PersonalizationRow]:
    """Fine-tune every client's head and score global vs personalized on the same test split."""
    rows = []
    for shard in shards:
        g_acc, g_loss = evaluate(model, dataset, shard.test_indices)
        pm = fine_tune_head(model, spec, dataset, shard, steps, lr, seed)
        p_acc, p_loss = evaluate(pm.model, dataset, shard.test_indices)
        rows.append(PersonalizationRow(shard.client_id, g_acc, p_acc, g_loss, p_loss))
    return rows


PERSONALIZATION_COLUMNS = ["client_id", "generalized_acc", "personalized_acc",
                           "generalized_loss", "personalized_loss"]


def write_personalization_csv(path, rows) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(PERSONALIZATION_COLUMNS)
        for r in rows:
            w.writerow([r.client_id, repr(r.generalized_acc), repr(r.personalized_acc),
                        repr(r.generalized_loss), repr(r.personalized_loss)])
