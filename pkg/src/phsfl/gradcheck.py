"""Central finite-difference checks of the analytic gradients in :mod:`phsfl.nn`.

Only ``nn.forward`` is used to build the numerical reference, never ``backward``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn


@dataclass
class CheckResult:
    name: str
    rel_error: float
    checked: int

    def passed(self, tol: float = 1e-4) -> bool:
        return self.rel_error <= tol


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


def _coords(size: int, max_coords: int | None, rng) -> np.ndarray:
    if max_coords is None or size <= max_coords:
        return np.arange(size)
    return np.sort(rng.choice(size, max_coords, replace=False))


def check_model(model: nn.LayeredModel, x: np.ndarray, loss_fn, upstream_fn, eps: float = 1e-5,
                max_coords: int | None = 200, seed: int = 0, name: str = "model") -> list[CheckResult]:
    """Compare every parameter block and the input gradient against central differences.

    ``loss_fn(out) -> float`` and ``upstream_fn(out) -> dloss/dout`` define the scalar objective.
    """
    rng = np.random.default_rng(seed)
    out, tape = nn.forward(model, x)
    grads = nn.backward(model, tape, upstream_fn(out))

    def objective(m, xx):
        return loss_fn(nn.forward(m, xx)[0])

    results = []
    for i, block in enumerate(model.blocks):
        if block.size == 0:
            continue
        idx = _coords(block.size, max_coords, rng)
        fd = np.empty(len(idx))
        for j, k in enumerate(idx):
            plus, minus = block.copy(), block.copy()
            plus[k] += eps
            minus[k] -= eps
            blocks_p = list(model.blocks)
            blocks_m = list(model.blocks)
            blocks_p[i], blocks_m[i] = plus, minus
            fd[j] = (objective(model.replace_blocks(blocks_p), x)
                     - objective(model.replace_blocks(blocks_m), x)) / (2 * eps)
        results.append(CheckResult(f"{name}[{i}:{model.layers[i].kind}]", rel_error(grads.blocks[i][idx], fd), len(idx)))

    flat_x = x.reshape(-1)
    idx = _coords(flat_x.size, max_coords, rng)
    fd = np.empty(len(idx))
    for j, k in enumerate(idx):
        xp, xm = flat_x.copy(), flat_x.copy()
        xp[k] += eps
        xm[k] -= eps
        fd[j] = (objective(model, xp.reshape(x.shape)) - objective(model, xm.reshape(x.shape))) / (2 * eps)
    results.append(CheckResult(f"{name}[input]", rel_error(grads.input_grad.reshape(-1)[idx], fd), len(idx)))
    return results


def _linear_probe(shape, rng):
    r = rng.normal(size=shape)
    return (lambda out: float(np.sum(out * r))), (lambda out: r)


def check_layer_kinds(seed: int = 0, eps: float = 1e-5) -> list[CheckResult]:
    """One single-layer model per layer kind under a random linear objective."""
    rng = np.random.default_rng(seed)
    cases = {
        nn.DENSE: ((6,), nn.dense(4)),
        nn.CONV2D: ((2, 7, 7), nn.conv2d(3, kernel=5)),
        "conv2d_pad": ((2, 6, 6), nn.conv2d(3, kernel=5, pad=2)),
        nn.MAXPOOL2D: ((2, 5, 5), nn.maxpool2d()),
        nn.RELU: ((3, 4, 4), nn.relu()),
        nn.FLATTEN: ((2, 3, 3), nn.flatten()),
    }
    results = []
    for name, (shape, build) in cases.items():
        layers = nn.stack(shape, [build])
        model = nn.init_model(layers, seed)
        x = rng.normal(size=(3,) + shape)
        if name == nn.RELU:
            # keep inputs away from the kink at zero
            x = np.where(np.abs(x) < 10 * eps, 0.5, x)
        loss_fn, up_fn = _linear_probe((3,) + layers[-1].out_shape, rng)
        results.extend(check_model(model, x, loss_fn, up_fn, eps, seed=seed, name=name))
    return results


def check_network(model: nn.LayeredModel, batch: int = 4, seed: int = 0, eps: float = 1e-5,
                  max_coords: int | None = 60) -> list[CheckResult]:
    """Whole-model check under cross-entropy on random inputs and labels."""
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(batch,) + model.input_shape)
    y = rng.integers(0, model.output_shape[0], size=batch)
    return check_model(model, x,
                       lambda out: nn.cross_entropy(out, y),
                       lambda out: nn.cross_entropy_with_grad(out, y)[1],
                       eps, max_coords, seed, name="network")
