"""Closed-form convergence bound for hierarchical split training, plus the two drift lemmas.

Notation: ``s1 = sum_b a_b sum_{u in b} a_u^2`` and ``s2 = sum_b a_b^2 sum_{u in b} a_u^2``
over the edge weights ``a_b`` and per-edge client weights ``a_u``.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from . import nn
from .data import make_batch, sample_minibatch

SIMPLEX_TOL = 1e-9


class InadmissibleStepSize(ValueError):
    pass


@dataclass(frozen=True)
class BoundInputs:
    beta: float           # smoothness
    sigma2: float         # mini-batch gradient variance
    eps0_sq: float        # client vs edge gradient divergence
    eps1_sq: float        # edge vs global gradient divergence
    lr: float
    local_steps: int      # kappa_0
    edge_rounds: int      # kappa_1
    T: int                # number of SGD steps averaged over
    delta_f: float        # f(w^0) - f(w^T)
    edge_weights: tuple[float, ...] = (1.0,)
    client_weights: tuple[tuple[float, ...], ...] = ((1.0,),)

    def __post_init__(self):
        if self.beta <= 0:
            raise ValueError("beta must be > 0")
        if min(self.sigma2, self.eps0_sq, self.eps1_sq) < 0:
            raise ValueError("sigma^2, eps0^2, eps1^2 must be >= 0")
        if self.lr < 0 or self.T < 1 or self.local_steps < 1 or self.edge_rounds < 1:
            raise ValueError("need lr >= 0, T >= 1, kappa_0 >= 1, kappa_1 >= 1")
        object.__setattr__(self, "edge_weights", tuple(float(a) for a in self.edge_weights))
        object.__setattr__(self, "client_weights", tuple(tuple(float(a) for a in w) for w in self.client_weights))
        if len(self.edge_weights) != len(self.client_weights):
            raise ValueError("one client-weight vector per edge required")
        for w in (self.edge_weights, *self.client_weights):
            if any(a < 0 for a in w) or abs(sum(w) - 1.0) > SIMPLEX_TOL:
                raise ValueError(f"weights {w} are not on the simplex")

    @classmethod
    def uniform(cls, num_edges: int, clients_per_edge: int, **kw) -> "BoundInputs":
        return cls(edge_weights=(1.0 / num_edges,) * num_edges,
                   client_weights=((1.0 / clients_per_edge,) * clients_per_edge,) * num_edges, **kw)

    @property
    def s1(self) -> float:
        return sum(ab * sum(au * au for au in w) for ab, w in zip(self.edge_weights, self.client_weights))

    @property
    def s2(self) -> float:
        return sum(ab * ab * sum(au * au for au in w) for ab, w in zip(self.edge_weights, self.client_weights))


def lr_threshold(inp: BoundInputs) -> float:
    return 1.0 / (2.0 * math.sqrt(5.0) * inp.beta * inp.edge_rounds * inp.local_steps)


def lr_admissible(inp: BoundInputs) -> bool:
    return inp.lr < lr_threshold(inp)


def gamma_terms(inp: BoundInputs) -> tuple[float, float, float, float]:
    """``(G0, G1, G0~, G1~)`` with the 80 k1^2 b^4 n^4 k0^4 term placed in G1."""
    b, n, k0, k1 = inp.beta, inp.lr, inp.local_steps, inp.edge_rounds
    s1, s2 = inp.s1, inp.s2
    q = b * b * n * n          # beta^2 eta^2
    quart = k1 ** 2 * q * q * k0 ** 4
    g0 = 4 * q * k0 ** 2 - 4 * q * k0 ** 2 * s1
    g1 = 80 * quart + 4 * k1 * k0 * q * s1 - 4 * k1 * k0 * q * s2 - 80 * quart * s1
    g0t = 12 * q * k0 ** 2 * (1 + 20 * k0 ** 2 * k1 ** 2 * q)
    g1t = 20 * q * k1 ** 2 * k0 ** 2
    return g0, g1, g0t, g1t


def gamma_terms_regrouped(inp: BoundInputs) -> tuple[float, float]:
    """``(G0, G1)`` with the 80 k1^2 b^4 n^4 k0^4 term moved from G1 into G0 (same sum)."""
    b, n, k0, k1 = inp.beta, inp.lr, inp.local_steps, inp.edge_rounds
    s1, s2 = inp.s1, inp.s2
    q = b * b * n * n
    quart = k1 ** 2 * q * q * k0 ** 4
    g0 = 4 * q * k0 ** 2 - 4 * q * k0 ** 2 * s1 + 80 * quart
    g1 = 4 * k1 * k0 * q * s1 - 4 * k1 * k0 * q * s2 - 80 * quart * s1
    return g0, g1


def _check_lr(inp: BoundInputs, warn: bool) -> None:
    if inp.lr <= 0:
        raise ValueError("the bound needs lr > 0")
    if warn and not lr_admissible(inp):
        warnings.warn(f"lr {inp.lr} >= {lr_threshold(inp)}: bound evaluated outside its admissible range",
                      stacklevel=3)


def theorem1_rhs(inp: BoundInputs, warn: bool = True) -> float:
    """Upper bound on the average squared global gradient norm over ``T`` steps."""
    _check_lr(inp, warn)
    g0, g1, g0t, g1t = gamma_terms(inp)
    return (2 * inp.delta_f / (inp.lr * inp.T)
            + inp.beta * inp.lr * inp.sigma2 * inp.s2
            + (g0 + g1) * inp.sigma2
            + g0t * inp.eps0_sq
            + g1t * inp.eps1_sq)


def theorem1_rhs_expanded(inp: BoundInputs, warn: bool = True) -> float:
    """Same bound written term by term with the regrouped gammas."""
    _check_lr(inp, warn)
    b, n, k0, k1 = inp.beta, inp.lr, inp.local_steps, inp.edge_rounds
    g0, g1 = gamma_terms_regrouped(inp)
    return (2 * inp.delta_f / (n * inp.T)
            + b * n * inp.sigma2 * inp.s2
            + g0 * inp.sigma2 + g1 * inp.sigma2
            + 12 * b ** 2 * inp.eps0_sq * n ** 2 * k0 ** 2
            + 20 * b ** 2 * inp.eps1_sq * n ** 2 * k1 ** 2 * k0 ** 2
            + 240 * inp.eps0_sq * k1 ** 2 * b ** 4 * n ** 4 * k0 ** 4)


def lemma_rhs(which: int, inp: BoundInputs) -> float:
    """Client-drift (``which=1``) or edge-drift (``which=2``) bound.

    The client-drift bound needs ``lr <= 1/(2 sqrt(3) beta k0)``, the edge-drift bound
    ``lr <= 1/(2 sqrt(5) beta k1 k0)``.
    """
    b, n, k0, k1 = inp.beta, inp.lr, inp.local_steps, inp.edge_rounds
    s1, s2 = inp.s1, inp.s2
    sig, e0, e1 = inp.sigma2, inp.eps0_sq, inp.eps1_sq
    if which == 1:
        limit = 1.0 / (2.0 * math.sqrt(3.0) * b * k0)
        if n > limit:
            raise InadmissibleStepSize(f"client-drift bound needs lr <= 1/(2 sqrt(3) beta kappa0) = {limit}, got {n}")
        return 2 * n ** 2 * k0 ** 2 * sig + 6 * e0 * n ** 2 * k0 ** 2 - 2 * n ** 2 * k0 ** 2 * sig * s1
    if which == 2:
        limit = lr_threshold(inp)
        if n > limit:
            raise InadmissibleStepSize(f"edge-drift bound needs lr <= 1/(2 sqrt(5) beta kappa1 kappa0) = {limit}, got {n}")
        quart = b ** 2 * k1 ** 2 * n ** 4 * k0 ** 4
        return (10 * e1 * n ** 2 * k1 ** 2 * k0 ** 2
                + 40 * quart * sig
                + 120 * quart * e0
                + 2 * k1 * k0 * n ** 2 * sig * s1
                - 2 * k1 * k0 * n ** 2 * sig * s2
                - 40 * quart * sig * s1)
    raise ValueError("which must be 1 or 2")


def sweep(inp: BoundInputs, lrs, local_steps, edge_rounds, rounds: int | None = None):
    """Bound over an (lr, kappa0, kappa1) grid.

    With ``rounds`` set, ``T = rounds * kappa1 * kappa0`` for each grid point; otherwise ``inp.T``.
    Yields ``(lr, kappa0, kappa1, rhs, admissible)``.
    """
    for lr in lrs:
        for k0 in local_steps:
            for k1 in edge_rounds:
                T = rounds * k1 * k0 if rounds else inp.T
                p = replace(inp, lr=float(lr), local_steps=int(k0), edge_rounds=int(k1), T=int(T))
                yield float(lr), int(k0), int(k1), theorem1_rhs(p, warn=False), lr_admissible(p)


# --- empirical constants ----------------------------------------------------------------

def _full_gradient(model, dataset, indices) -> np.ndarray:
    batch = make_batch(dataset, indices)
    return nn.loss_and_grads(model, batch.features, batch.labels)[1].flat()


def weighted_loss(model, dataset, edges, edge_weights, client_weights) -> float:
    """Global objective: sum_b a_b sum_u a_u f_u(model) over clients' training samples."""
    total = 0.0
    for ab, shards, cw in zip(edge_weights, edges, client_weights):
        for au, s in zip(cw, shards):
            batch = make_batch(dataset, s.train_indices)
            total += ab * au * nn.cross_entropy(nn.predict(model, batch.features), batch.labels)
    return total


@dataclass
class Estimates:
    beta: float
    sigma2: float
    eps0_sq: float
    eps1_sq: float
    details: dict = field(default_factory=dict)


def estimate_constants(model, dataset, edges, edge_weights, client_weights, batch_size: int,
                       seed: int = 0, draws: int = 8, pairs: int = 4, radius: float = 1e-2) -> Estimates:
    """Local estimates of beta, sigma^2, eps0^2, eps1^2 at ``model``.

    ``edges`` is a list of shard lists (one per edge server). sigma^2 is the worst client's
    mean squared deviation of mini-batch from full-batch gradients; eps0^2 the worst edge's
    weighted client divergence; eps1^2 the weighted edge divergence; beta the largest
    gradient-difference ratio over random perturbations of relative size ``radius``.
    """
    rng = np.random.default_rng(seed)
    client_grads = [[_full_gradient(model, dataset, s.train_indices) for s in shards] for shards in edges]
    edge_grads = [sum(a * g for a, g in zip(cw, gs)) for cw, gs in zip(client_weights, client_grads)]
    global_grad = sum(a * g for a, g in zip(edge_weights, edge_grads))
    eps0 = max(sum(a * float(np.sum((g - gb) ** 2)) for a, g in zip(cw, gs))
               for cw, gs, gb in zip(client_weights, client_grads, edge_grads))
    eps1 = sum(a * float(np.sum((gb - global_grad) ** 2)) for a, gb in zip(edge_weights, edge_grads))

    sigma2 = 0.0
    for shards, gs in zip(edges, client_grads):
        for s, g in zip(shards, gs):
            n = min(batch_size, s.num_train)
            dev = []
            for _ in range(draws):
                batch = sample_minibatch(dataset, s.train_indices, n, rng)
                gm = nn.loss_and_grads(model, batch.features, batch.labels)[1].flat()
                dev.append(float(np.sum((gm - g) ** 2)))
            sigma2 = max(sigma2, float(np.mean(dev)))

    flat = model.flat()
    sizes = np.cumsum([b.size for b in model.blocks])[:-1]
    all_idx = np.concatenate([s.train_indices for shards in edges for s in shards])
    base = _full_gradient(model, dataset, all_idx)
    beta = 0.0
    for _ in range(pairs):
        d = rng.normal(size=flat.size)
        d *= radius * max(np.linalg.norm(flat), 1.0) / np.linalg.norm(d)
        moved = model.replace_blocks(np.split(flat + d, sizes))
        g2 = _full_gradient(moved, dataset, all_idx)
        beta = max(beta, float(np.linalg.norm(g2 - base) / np.linalg.norm(d)))
    return Estimates(beta, sigma2, eps0, eps1, {"draws": draws, "pairs": pairs, "radius": radius})
