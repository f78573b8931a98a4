"""Hierarchical training loops: PHSFL (split, frozen head), HSFL (split, all trained),
HFL (full model on the client) and a centralized SGD reference.

One global round = broadcast, ``edge_rounds`` rounds of [sync, ``local_epochs`` x
``batches_per_epoch`` local steps per client, edge aggregation], then global aggregation.
Clients and edges are always visited in id order so runs are bit-reproducible.
"""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, field
from math import ceil, prod
from typing import Callable

import numpy as np

from . import comm, nn
from .data import ClientShard, Dataset, make_batch, sample_minibatch
from .nn import LayeredModel
from .personalize import EvalReport, evaluate, report
from .split import (LabelStore, PartitionSpec, assemble, client_forward, client_step,
                    server_step)

PHSFL = "phsfl"
HSFL = "hsfl"
HFL = "hfl"
CENTRALIZED = "centralized"
MODES = (PHSFL, HSFL, HFL, CENTRALIZED)

WEIGHT_SUM_TOL = 1e-12


@dataclass(frozen=True)
class RoundClock:
    edge_rounds: int   # kappa_1
    local_steps: int   # kappa_0

    def __post_init__(self):
        if self.edge_rounds < 1 or self.local_steps < 1:
            raise ValueError("kappa_1 and kappa_0 must be >= 1")

    def to_scalar(self, t2: int, t1: int, t0: int) -> int:
        if t2 < 0 or not 0 <= t1 < self.edge_rounds or not 0 <= t0 < self.local_steps:
            raise ValueError(f"clock components out of range: ({t2}, {t1}, {t0})")
        return t2 * self.edge_rounds * self.local_steps + t1 * self.local_steps + t0

    def from_scalar(self, t: int) -> tuple[int, int, int]:
        if t < 0:
            raise ValueError("step index must be >= 0")
        t2, rest = divmod(t, self.edge_rounds * self.local_steps)
        t1, t0 = divmod(rest, self.local_steps)
        return t2, t1, t0


@dataclass
class TrainConfig:
    mode: str = PHSFL
    num_edges: int = 1           # B
    num_clients: int = 1         # U
    alpha: float = 0.1           # Dirichlet concentration
    local_epochs: int = 1        # kappa_0
    edge_rounds: int = 1         # kappa_1
    global_rounds: int = 1       # R
    lr: float = 0.01             # eta
    batch_size: int = 5          # N
    batches_per_epoch: int = 1   # N-bar
    seed: int = 0
    cut_after: int = 3
    head_start: int | None = None  # None: the last layer
    weights: str = "data"          # "data" (sample-count) or "uniform"
    freeze_head: bool | None = None  # None: frozen in phsfl only
    omega: int = 64

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.lr <= 0:
            raise ValueError("lr must be > 0")
        if self.alpha <= 0:
            raise ValueError("alpha must be > 0")
        for name in ("num_edges", "num_clients", "local_epochs", "edge_rounds", "global_rounds",
                     "batch_size", "batches_per_epoch", "omega"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.num_edges > self.num_clients:
            raise ValueError("more edge servers than clients")
        if self.weights not in ("data", "uniform"):
            raise ValueError("weights must be 'data' or 'uniform'")

    @property
    def head_frozen(self) -> bool:
        return self.mode == PHSFL if self.freeze_head is None else self.freeze_head

    def partition(self, model: LayeredModel) -> PartitionSpec:
        head = len(model) - 1 if self.head_start is None else self.head_start
        spec = PartitionSpec(self.cut_after, head)
        spec.validate(model)
        return spec


def aggregate(parts) -> LayeredModel:
    """Parameter-wise weighted mean of congruent models, summed in the given order.

    Results are clipped to the per-parameter [min, max] of the inputs, so identical inputs
    come back bit-identical and every output stays in the inputs' hull.
    """
    parts = list(parts)
    if not parts:
        raise ValueError("nothing to aggregate")
    weights = [float(w) for _, w in parts]
    if any(w < 0 or w > 1 for w in weights) or abs(sum(weights) - 1.0) > WEIGHT_SUM_TOL:
        raise ValueError(f"aggregation weights must lie in [0, 1] and sum to 1, got {weights}")
    first = parts[0][0]
    for m, _ in parts[1:]:
        if m.layers != first.layers:
            raise ValueError("models to aggregate are not congruent")
    blocks = []
    for i in range(len(first)):
        if first.blocks[i].size == 0:
            blocks.append(first.blocks[i])
            continue
        acc = np.zeros_like(first.blocks[i])
        lo = first.blocks[i].copy()
        hi = first.blocks[i].copy()
        for m, w in parts:
            b = m.blocks[i]
            acc += w * b
            np.minimum(lo, b, out=lo)
            np.maximum(hi, b, out=hi)
        blocks.append(np.clip(acc, lo, hi))
    return first.replace_blocks(blocks)


edge_aggregate = aggregate
global_aggregate = aggregate


def client_rng(seed: int, client: int) -> np.random.Generator:
    """Mini-batch sampling stream of one client."""
    return np.random.default_rng([seed, client])


def cut_width(model: LayeredModel, spec: PartitionSpec) -> int:
    return prod(model.layers[spec.cut_after - 1].out_shape)


def overhead_params(config: TrainConfig, model: LayeredModel, shard: ClientShard) -> comm.OverheadParams:
    spec = config.partition(model)
    return comm.OverheadParams(
        batch_size=min(config.batch_size, shard.num_train),
        batches_per_epoch=config.batches_per_epoch,
        cut_width=cut_width(model, spec),
        client_params=model.sub(0, spec.cut_after).total_params,
        total_params=model.total_params,
        client_samples=shard.num_train,
        local_epochs=config.local_epochs,
        omega=config.omega,
    )


@dataclass
class RoundRecord:
    round: int
    accuracies: np.ndarray
    losses: np.ndarray
    report: EvalReport
    cum_bits_phsfl: int
    cum_bits_hfl: int


@dataclass
class TrainingTrace:
    config: TrainConfig
    initial_model: LayeredModel
    rounds: list[RoundRecord] = field(default_factory=list)
    final_model: LayeredModel | None = None
    ledger: comm.CommLedger = field(default_factory=comm.CommLedger)
    local_steps: dict[int, int] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.rounds)


METRICS_COLUMNS = ["round", "mode", "mean_acc", "std_acc", "min_acc", "max_acc",
                   "mean_loss", "std_loss", "cum_comm_bits_phsfl", "cum_comm_bits_hfl"]


def write_metrics_csv(path, trace: TrainingTrace) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(METRICS_COLUMNS)
        for r in trace.rounds:
            rep = r.report
            w.writerow([r.round, trace.config.mode, repr(rep.mean_acc), repr(rep.std_acc),
                        repr(rep.min_acc), repr(rep.max_acc), repr(rep.mean_loss),
                        repr(rep.std_loss), r.cum_bits_phsfl, r.cum_bits_hfl])


def _edge_weights(shards: list[ClientShard], policy: str) -> list[float]:
    if policy == "uniform":
        return [1.0 / len(shards)] * len(shards)
    total = sum(s.num_train for s in shards)
    return [s.num_train / total for s in shards]


def _evaluate_round(model, dataset, shards):
    evals = [evaluate(model, dataset, s.test_indices) for s in shards]
    acc, loss = zip(*evals)
    return np.array(acc), np.array(loss), report(evals)


def _local_split(cfg, dataset, shard, labels, client, server, rng, ledger, t2, t1, z_c, head_layers):
    """kappa_0 epochs of N-bar split SGD steps for one client; returns (client, server, steps)."""
    n = min(cfg.batch_size, shard.num_train)
    idx_bits = comm.index_bits(shard.num_train)
    steps = 0
    for _ in range(cfg.local_epochs):
        for _ in range(cfg.batches_per_epoch):
            batch = sample_minibatch(dataset, shard.train_indices, n, rng)
            act = client_forward(client, batch.features, batch.sample_indices)
            ledger.record(t2, t1, shard.client_id, comm.ACTIVATION, comm.activation_bits(n, z_c, cfg.omega))
            ledger.record(t2, t1, shard.client_id, comm.INDICES, n * idx_bits)
            _, server, cut_grad = server_step(server, act, labels, cfg.lr, cfg.head_frozen, head_layers)
            ledger.record(t2, t1, shard.client_id, comm.GRADIENT, comm.activation_bits(n, z_c, cfg.omega))
            client = client_step(client, act, cut_grad, cfg.lr)
            steps += 1
    return client, server, steps


def _local_full(cfg, dataset, shard, model, rng):
    n = min(cfg.batch_size, shard.num_train)
    freeze = [False] * len(model)
    if cfg.head_frozen:
        head = cfg.partition(model).head_start
        freeze[head:] = [True] * (len(model) - head)
    steps = 0
    for _ in range(cfg.local_epochs):
        for _ in range(cfg.batches_per_epoch):
            batch = sample_minibatch(dataset, shard.train_indices, n, rng)
            _, grads, _ = nn.loss_and_grads(model, batch.features, batch.labels)
            model = nn.sgd_step(model, grads, cfg.lr, freeze)
            steps += 1
    return model, steps


def run_training(config: TrainConfig, model: LayeredModel, dataset: Dataset, shards: list[ClientShard],
                 on_round: Callable[[int, LayeredModel], None] | None = None) -> TrainingTrace:
    """Train for ``global_rounds`` rounds and evaluate the global model on every client's test split."""
    config.validate()
    if len(shards) != config.num_clients:
        raise ValueError(f"config has {config.num_clients} clients but {len(shards)} shards were given")
    for s in shards:
        if s.num_train < 1 or len(s.test_indices) < 1:
            raise ValueError(f"client {s.client_id} needs at least one train and one test sample")
    spec = config.partition(model)
    trace = TrainingTrace(config, model, ledger=comm.CommLedger(config.omega))
    trace.local_steps = {s.client_id: 0 for s in shards}

    if config.mode == CENTRALIZED:
        return _run_centralized(config, model, dataset, shards, trace, on_round)

    edges: dict[int, list[ClientShard]] = {}
    for s in sorted(shards, key=lambda s: s.client_id):
        edges.setdefault(s.edge_id, []).append(s)
    if len(edges) != config.num_edges:
        raise ValueError(f"shards span {len(edges)} edge servers, config says {config.num_edges}")
    edge_ids = sorted(edges)
    n_total = sum(s.num_train for s in shards)
    edge_weights = ([1.0 / len(edge_ids)] * len(edge_ids) if config.weights == "uniform"
                    else [sum(s.num_train for s in edges[b]) / n_total for b in edge_ids])
    labels = {b: LabelStore(np.concatenate([s.indices for s in edges[b]]),
                            dataset.labels[np.concatenate([s.indices for s in edges[b]])])
              for b in edge_ids}
    rngs = {s.client_id: client_rng(config.seed, s.client_id) for s in shards}
    split_mode = config.mode in (PHSFL, HSFL)
    z_c = cut_width(model, spec)
    z0 = model.sub(0, spec.cut_after).total_params
    params = {s.client_id: overhead_params(config, model, s) for s in shards}
    phi_hfl = comm.phi_hfl(model.total_params, config.omega)

    global_model = model
    cum_other = 0
    for t2 in range(config.global_rounds):
        edge_models = []
        for b in edge_ids:
            members = edges[b]
            alphas = _edge_weights(members, config.weights)
            edge_model = global_model
            for t1 in range(config.edge_rounds):
                client_model = edge_model.sub(0, spec.cut_after)
                server_model = edge_model.sub(spec.cut_after, len(edge_model))
                clients, servers, fulls = [], [], []
                for s in members:
                    u = s.client_id
                    if split_mode:
                        trace.ledger.record(t2, t1, u, comm.BROADCAST, comm.phi_off(z0, config.omega))
                        wc, ws, steps = _local_split(config, dataset, s, labels[b], client_model,
                                                     server_model, rngs[u], trace.ledger, t2, t1, z_c,
                                                     len(model) - spec.head_start)
                        trace.ledger.record(t2, t1, u, comm.OFFLOAD, comm.phi_off(z0, config.omega))
                        clients.append(wc)
                        servers.append(ws)
                        cum_other += phi_hfl
                    else:
                        trace.ledger.record(t2, t1, u, comm.BROADCAST, model.total_params * (config.omega + 1))
                        wu, steps = _local_full(config, dataset, s, edge_model, rngs[u])
                        trace.ledger.record(t2, t1, u, comm.OFFLOAD, model.total_params * (config.omega + 1))
                        fulls.append(wu)
                        cum_other += comm.phi_phsfl_bound(params[u])
                    trace.local_steps[u] += steps
                if split_mode:
                    edge_model = assemble(aggregate(zip(clients, alphas)), aggregate(zip(servers, alphas)))
                else:
                    edge_model = aggregate(zip(fulls, alphas))
            edge_models.append(edge_model)
        global_model = aggregate(zip(edge_models, edge_weights))

        acc, loss, rep = _evaluate_round(global_model, dataset, shards)
        measured = trace.ledger.total()
        if split_mode:
            bits_phsfl, bits_hfl = measured, cum_other
        else:
            bits_phsfl, bits_hfl = cum_other, measured
        trace.rounds.append(RoundRecord(t2, acc, loss, rep, bits_phsfl, bits_hfl))
        if on_round is not None:
            on_round(t2, global_model)
    trace.final_model = global_model
    return trace


def _run_centralized(config, model, dataset, shards, trace, on_round):
    """Plain SGD over the union of all clients' training samples, one epoch per round."""
    pool = np.sort(np.concatenate([s.train_indices for s in shards]))
    rng = np.random.default_rng([config.seed, 2**32 - 1])
    n = config.batch_size
    freeze = [False] * len(model)
    if config.freeze_head:
        head = config.partition(model).head_start
        freeze[head:] = [True] * (len(model) - head)
    steps_per_epoch = ceil(len(pool) / n)
    for t2 in range(config.global_rounds):
        order = pool[rng.permutation(len(pool))]
        for k in range(steps_per_epoch):
            batch = make_batch(dataset, order[k * n:(k + 1) * n])
            _, grads, _ = nn.loss_and_grads(model, batch.features, batch.labels)
            model = nn.sgd_step(model, grads, config.lr, freeze)
        acc, loss, rep = _evaluate_round(model, dataset, shards)
        trace.rounds.append(RoundRecord(t2, acc, loss, rep, 0, 0))
        if on_round is not None:
            on_round(t2, model)
    trace.final_model = model
    return trace


def config_dict(config: TrainConfig) -> dict:
    return asdict(config)
