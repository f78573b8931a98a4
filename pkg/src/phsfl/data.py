"""Datasets, Dirichlet label-skew partitioning, client/edge topology and mini-batch sampling."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from math import prod
from pathlib import Path
from typing import Sequence

import numpy as np

DATASET_MAGIC = b"PHSFDATA"


@dataclass
class Dataset:
    features: np.ndarray  # (D, *input_shape), float32
    labels: np.ndarray    # (D,), int64
    num_classes: int

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.features) < 1 or len(self.features) != len(self.labels):
            raise ValueError("dataset needs D >= 1 and one label per sample")
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise ValueError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def input_shape(self) -> tuple[int, ...]:
        return tuple(self.features.shape[1:])


@dataclass
class ClientShard:
    client_id: int
    edge_id: int
    indices: np.ndarray        # all global sample indices of this client
    train_indices: np.ndarray
    test_indices: np.ndarray

    def __len__(self) -> int:
        return len(self.indices)

    @property
    def num_train(self) -> int:
        return len(self.train_indices)


@dataclass
class Batch:
    features: np.ndarray  # float64
    labels: np.ndarray
    sample_indices: np.ndarray

    def __len__(self) -> int:
        return len(self.labels)


def edge_assignment(num_clients: int, num_edges: int) -> list[list[int]]:
    """Contiguous blocks of client ids per edge server."""
    if not 1 <= num_edges <= num_clients:
        raise ValueError(f"need 1 <= num_edges ({num_edges}) <= num_clients ({num_clients})")
    return [block.tolist() for block in np.array_split(np.arange(num_clients), num_edges)]


def _largest_remainder(total: int, proportions: np.ndarray) -> np.ndarray:
    raw = proportions * total
    counts = np.floor(raw).astype(np.int64)
    short = total - int(counts.sum())
    if short > 0:
        order = np.argsort(-(raw - counts), kind="stable")
        counts[order[:short]] += 1
    return counts


def _split_test(indices: np.ndarray, labels: np.ndarray, fraction: float, rng):
    """Per-class stratified test split; keeps both sides nonempty when the shard has >= 2 samples."""
    test, train = [], []
    for c in np.unique(labels):
        members = indices[labels == c]
        members = members[rng.permutation(len(members))]
        k = int(np.floor(fraction * len(members) + 0.5))
        test.extend(members[:k].tolist())
        train.extend(members[k:].tolist())
    if fraction > 0 and len(indices) >= 2:
        if not test:
            test.append(train.pop())
        elif not train:
            train.append(test.pop())
    return np.sort(np.array(train, dtype=np.int64)), np.sort(np.array(test, dtype=np.int64))


def dirichlet_partition(dataset: Dataset, num_clients: int, alpha: float, seed: int,
                        num_edges: int = 1, test_fraction: float = 0.2, min_size: int = 1,
                        max_retries: int = 1000) -> list[ClientShard]:
    """Split each class over clients with proportions drawn from a symmetric Dir(alpha).

    Proportions are converted to counts by largest-remainder rounding. Draws are repeated
    (up to ``max_retries``) until every client has at least ``min_size`` samples.
    """
    n = len(dataset)
    if num_clients < 1 or alpha <= 0:
        raise ValueError("need num_clients >= 1 and alpha > 0")
    if num_clients > n or num_clients * min_size > n:
        raise ValueError(f"cannot give {num_clients} clients {min_size}+ samples each from {n}")
    rng = np.random.default_rng(seed)
    classes = [np.flatnonzero(dataset.labels == c) for c in range(dataset.num_classes)]
    for _ in range(max_retries):
        counts = np.zeros((dataset.num_classes, num_clients), dtype=np.int64)
        for c, members in enumerate(classes):
            if len(members):
                counts[c] = _largest_remainder(len(members), rng.dirichlet(np.full(num_clients, alpha)))
        if counts.sum(axis=0).min() >= min_size:
            break
    else:
        raise RuntimeError(f"no Dirichlet draw gave every client >= {min_size} samples in {max_retries} tries")

    owned = [[] for _ in range(num_clients)]
    for c, members in enumerate(classes):
        members = members[rng.permutation(len(members))]
        bounds = np.concatenate([[0], np.cumsum(counts[c])])
        for u in range(num_clients):
            owned[u].extend(members[bounds[u]:bounds[u + 1]].tolist())

    edges = edge_assignment(num_clients, num_edges)
    edge_of = {u: b for b, us in enumerate(edges) for u in us}
    shards = []
    for u in range(num_clients):
        idx = np.sort(np.array(owned[u], dtype=np.int64))
        train, test = _split_test(idx, dataset.labels[idx], test_fraction, rng)
        shards.append(ClientShard(u, edge_of[u], idx, train, test))
    return shards


def label_entropy(dataset: Dataset, indices) -> float:
    """Shannon entropy (nats) of the label histogram of a sample subset."""
    counts = np.bincount(dataset.labels[np.asarray(indices)], minlength=dataset.num_classes)
    p = counts[counts > 0] / counts.sum()
    return float(-(p * np.log(p)).sum())


def sample_minibatch(dataset: Dataset, indices, batch_size: int, rng: np.random.Generator) -> Batch:
    """Uniform draw of ``batch_size`` distinct samples from ``indices`` (global ids)."""
    indices = np.asarray(indices)
    if batch_size < 1:
        raise ValueError("batch size must be >= 1")
    if batch_size > len(indices):
        raise ValueError(f"batch size {batch_size} exceeds the {len(indices)} available samples")
    chosen = indices[rng.choice(len(indices), size=batch_size, replace=False)]
    return make_batch(dataset, chosen)


def make_batch(dataset: Dataset, indices) -> Batch:
    indices = np.asarray(indices, dtype=np.int64)
    return Batch(dataset.features[indices].astype(np.float64), dataset.labels[indices], indices)


def generate_synthetic(num_classes: int, num_samples: int, input_shape: Sequence[int], seed: int,
                       margin: float = 1.5, noise: float = 1.0) -> Dataset:
    """Class-conditional Gaussian blobs.

    Each class mean is a random direction scaled to norm ``margin * sqrt(dim) / 4``;
    samples add isotropic noise with std ``noise``. Labels are balanced.
    """
    if num_classes < 2:
        raise ValueError("need at least 2 classes")
    rng = np.random.default_rng(seed)
    dim = prod(input_shape)
    means = rng.normal(size=(num_classes, dim))
    means *= margin * np.sqrt(dim) / 4 / np.linalg.norm(means, axis=1, keepdims=True)
    labels = rng.permutation(np.arange(num_samples) % num_classes)
    x = means[labels] + noise * rng.normal(size=(num_samples, dim))
    return Dataset(x.reshape((num_samples,) + tuple(input_shape)).astype(np.float32), labels, num_classes)


# --- dataset file -----------------------------------------------------------------------
# b"PHSFDATA" | u32 D | u32 C | u32 rank | rank x u32 dims | D*prod(dims) f32 LE | D u8 labels

def dataset_to_bytes(ds: Dataset) -> bytes:
    if ds.num_classes > 256:
        raise ValueError("labels are stored as u8; at most 256 classes")
    shape = ds.input_shape
    head = DATASET_MAGIC + struct.pack(f"<III{len(shape)}I", len(ds), ds.num_classes, len(shape), *shape)
    return head + ds.features.astype("<f4").tobytes() + ds.labels.astype(np.uint8).tobytes()


def dataset_from_bytes(data: bytes) -> Dataset:
    if data[:8] != DATASET_MAGIC:
        raise ValueError("bad dataset magic at offset 0")
    if len(data) < 20:
        raise ValueError(f"truncated dataset header at offset {len(data)}, expected 20 bytes")
    d, c, rank = struct.unpack_from("<III", data, 8)
    off = 20
    if len(data) < off + 4 * rank:
        raise ValueError(f"truncated dataset shape at offset {len(data)}, expected {off + 4 * rank} bytes")
    shape = struct.unpack_from(f"<{rank}I", data, off)
    off += 4 * rank
    feat_end = off + 4 * d * prod(shape)
    if len(data) < feat_end:
        raise ValueError(f"truncated features at offset {len(data)}, expected {feat_end} bytes")
    if len(data) < feat_end + d:
        raise ValueError(f"truncated labels at offset {len(data)}, expected {feat_end + d} bytes")
    if len(data) > feat_end + d:
        raise ValueError(f"trailing bytes after offset {feat_end + d}")
    feats = np.frombuffer(data, dtype="<f4", count=d * prod(shape), offset=off).reshape((d,) + shape)
    labels = np.frombuffer(data, dtype=np.uint8, count=d, offset=feat_end)
    return Dataset(feats.astype(np.float32), labels.astype(np.int64), c)


def write_dataset(ds: Dataset, path) -> None:
    Path(path).write_bytes(dataset_to_bytes(ds))


def load_dataset(path) -> Dataset:
    return dataset_from_bytes(Path(path).read_bytes())
