"""Wiring from an ExperimentConfig to data, model, training runs and on-disk artifacts."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import bound, comm, gradcheck, nn
from .config import ExperimentConfig, config_hash, dump_config
from .data import Dataset, dirichlet_partition, generate_synthetic, load_dataset
from .orchestrator import overhead_params, run_training, write_metrics_csv
from .personalize import evaluate, personalize_all, report, write_personalization_csv
from .split import PartitionSpec

log = logging.getLogger("phsfl")


def build_dataset(cfg: ExperimentConfig) -> Dataset:
    d = cfg.data
    if d.source == "synthetic":
        return generate_synthetic(d.num_classes, d.num_samples, tuple(d.input_shape), cfg.train.seed, d.margin)
    ds = load_dataset(d.source)
    if ds.num_classes != d.num_classes or list(ds.input_shape) != list(d.input_shape):
        raise ValueError(f"{d.source}: dataset has {ds.num_classes} classes and shape {ds.input_shape}, "
                         f"config expects {d.num_classes} and {tuple(d.input_shape)}")
    return ds


def build_layers(cfg: ExperimentConfig):
    c, h, w = cfg.data.input_shape
    if h != w:
        raise ValueError("square inputs expected")
    m = cfg.model
    return nn.standard_cnn(c, cfg.data.num_classes, h, tuple(m.channels), m.hidden, m.kernel, m.pad)


def build_model(cfg: ExperimentConfig) -> nn.LayeredModel:
    return nn.init_model(build_layers(cfg), cfg.train.seed)


def build_shards(cfg: ExperimentConfig, ds: Dataset):
    t = cfg.train
    return dirichlet_partition(ds, t.num_clients, t.alpha, t.seed, num_edges=t.num_edges,
                               test_fraction=cfg.data.test_fraction, min_size=cfg.data.min_client_samples)


def artifact_dir(cfg: ExperimentConfig) -> Path:
    return Path(cfg.out_dir) / f"{cfg.name}-{config_hash(cfg)}-s{cfg.train.seed}"


def _prepare(cfg: ExperimentConfig) -> Path:
    out = artifact_dir(cfg)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.yaml").write_text(dump_config(cfg))
    return out


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _edges(shards):
    edges = {}
    for s in shards:
        edges.setdefault(s.edge_id, []).append(s)
    return [edges[b] for b in sorted(edges)]


def _weights(cfg, shards):
    edges = _edges(shards)
    if cfg.train.weights == "uniform":
        return [1.0 / len(edges)] * len(edges), [[1.0 / len(e)] * len(e) for e in edges]
    total = sum(s.num_train for s in shards)
    ab = [sum(s.num_train for s in e) / total for e in edges]
    au = [[s.num_train / sum(x.num_train for x in e) for s in e] for e in edges]
    return ab, au


def _bound_inputs(cfg, shards, delta_f=None, est=None) -> bound.BoundInputs:
    b, t = cfg.bound, cfg.train
    ab, au = _weights(cfg, shards)
    return bound.BoundInputs(
        beta=est.beta if est else b.beta,
        sigma2=est.sigma2 if est else b.sigma2,
        eps0_sq=est.eps0_sq if est else b.eps0_sq,
        eps1_sq=est.eps1_sq if est else b.eps1_sq,
        lr=t.lr, local_steps=t.local_epochs, edge_rounds=t.edge_rounds,
        T=t.global_rounds * t.edge_rounds * t.local_epochs,
        delta_f=b.delta_f if delta_f is None else delta_f,
        edge_weights=tuple(ab), client_weights=tuple(tuple(w) for w in au))


def cmd_train(cfg: ExperimentConfig) -> dict:
    out = _prepare(cfg)
    ds = build_dataset(cfg)
    shards = build_shards(cfg, ds)
    model = build_model(cfg)
    log.info("training %s: %d clients, %d rounds", cfg.train.mode, len(shards), cfg.train.global_rounds)
    trace = run_training(cfg.train, model, ds, shards)
    write_metrics_csv(out / "metrics.csv", trace)
    nn.save_model(trace.final_model, out / "model.phsfl")

    spec = cfg.train.partition(model)
    ft_lr = cfg.finetune.lr if cfg.finetune.lr is not None else cfg.train.lr
    rows = personalize_all(trace.final_model, spec, ds, shards, cfg.finetune.steps, ft_lr, cfg.train.seed)
    write_personalization_csv(out / "personalization.csv", rows)

    est = None
    delta_f = None
    if cfg.bound.estimate:
        ab, au = _weights(cfg, shards)
        edges = _edges(shards)
        est = bound.estimate_constants(trace.final_model, ds, edges, ab, au, cfg.train.batch_size, cfg.train.seed)
        delta_f = (bound.weighted_loss(model, ds, edges, ab, au)
                   - bound.weighted_loss(trace.final_model, ds, edges, ab, au))
        inp = _bound_inputs(cfg, shards, delta_f, est)
        _write_json(out / "bound.json", {"beta": est.beta, "sigma2": est.sigma2, "eps0_sq": est.eps0_sq,
                                         "eps1_sq": est.eps1_sq, "delta_f": delta_f,
                                         "rhs": bound.theorem1_rhs(inp, warn=False),
                                         "lr_admissible": bound.lr_admissible(inp)})
    last = trace.rounds[-1].report
    summary = {
        "final_mean_acc": last.mean_acc,
        "final_std_acc": last.std_acc,
        "personalized_mean_acc": float(np.mean([r.personalized_acc for r in rows])),
        "comm_bits_total": trace.ledger.total(),
        "lr_admissible": bound.lr_admissible(_bound_inputs(cfg, shards, delta_f, est)),
    }
    _write_json(out / "summary.json", summary)
    return summary


def _checkpoint(cfg, path):
    path = Path(path) if path else artifact_dir(cfg) / "model.phsfl"
    if not path.exists():
        raise FileNotFoundError(f"checkpoint {path} not found; run 'train' first or pass --checkpoint")
    return nn.load_model(path)


def cmd_finetune(cfg: ExperimentConfig, checkpoint=None) -> dict:
    out = _prepare(cfg)
    model = _checkpoint(cfg, checkpoint)
    ds = build_dataset(cfg)
    shards = build_shards(cfg, ds)
    ft_lr = cfg.finetune.lr if cfg.finetune.lr is not None else cfg.train.lr
    rows = personalize_all(model, cfg.train.partition(model), ds, shards, cfg.finetune.steps, ft_lr, cfg.train.seed)
    write_personalization_csv(out / "personalization.csv", rows)
    res = {"generalized_mean_acc": float(np.mean([r.generalized_acc for r in rows])),
           "personalized_mean_acc": float(np.mean([r.personalized_acc for r in rows]))}
    _write_json(out / "finetune.json", res)
    return res


def cmd_eval(cfg: ExperimentConfig, checkpoint=None) -> dict:
    out = _prepare(cfg)
    model = _checkpoint(cfg, checkpoint)
    ds = build_dataset(cfg)
    shards = build_shards(cfg, ds)
    evals = [evaluate(model, ds, s.test_indices) for s in shards]
    with open(out / "eval.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["client_id", "accuracy", "loss"])
        for s, (acc, loss) in zip(shards, evals):
            w.writerow([s.client_id, repr(acc), repr(loss)])
    rep = report(evals)
    res = {"mean_acc": rep.mean_acc, "std_acc": rep.std_acc, "min_acc": rep.min_acc,
           "max_acc": rep.max_acc, "mean_loss": rep.mean_loss, "std_loss": rep.std_loss}
    _write_json(out / "eval.json", res)
    return res


def cmd_bound(cfg: ExperimentConfig, checkpoint=None) -> dict:
    out = _prepare(cfg)
    ds = build_dataset(cfg)
    shards = build_shards(cfg, ds)
    est = None
    if cfg.bound.estimate:
        model = _checkpoint(cfg, checkpoint) if checkpoint else build_model(cfg)
        ab, au = _weights(cfg, shards)
        est = bound.estimate_constants(model, ds, _edges(shards), ab, au, cfg.train.batch_size, cfg.train.seed)
    inp = _bound_inputs(cfg, shards, est=est)
    with open(out / "bound.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["lr", "kappa0", "kappa1", "rhs", "admissible"])
        for lr, k0, k1, rhs, ok in bound.sweep(inp, cfg.bound.lrs, cfg.bound.local_steps,
                                               cfg.bound.edge_rounds, rounds=cfg.train.global_rounds):
            w.writerow([repr(lr), k0, k1, repr(rhs), int(ok)])
    res = {"rhs": bound.theorem1_rhs(inp, warn=False), "lr_admissible": bound.lr_admissible(inp),
           "lr_threshold": bound.lr_threshold(inp)}
    _write_json(out / "bound.json", res)
    return res


def cmd_comm(cfg: ExperimentConfig) -> dict:
    out = _prepare(cfg)
    ds = build_dataset(cfg)
    shards = build_shards(cfg, ds)
    model = build_model(cfg)
    rows = []
    for s in shards:
        p = overhead_params(cfg.train, model, s)
        rows.append([s.client_id, comm.phi_local(p), comm.phi_off(p.client_params, p.omega),
                     comm.phi_phsfl_bound(p), comm.phi_hfl(p.total_params, p.omega), int(comm.is_efficient(p))])
    with open(out / "comm.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["client_id", "phi_local", "phi_off", "phi_phsfl_bound", "phi_hfl", "efficient"])
        w.writerows(rows)
    res = {"efficient_clients": sum(r[-1] for r in rows), "clients": len(rows)}
    _write_json(out / "comm.json", res)
    return res


def cmd_partition(cfg: ExperimentConfig) -> dict:
    out = _prepare(cfg)
    ds = build_dataset(cfg)
    shards = build_shards(cfg, ds)
    with open(out / "partition.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["client_id", "edge_id", "n_train", "n_test"] + [f"class_{c}" for c in range(ds.num_classes)])
        for s in shards:
            counts = np.bincount(ds.labels[s.indices], minlength=ds.num_classes)
            w.writerow([s.client_id, s.edge_id, s.num_train, len(s.test_indices)] + counts.tolist())
    return {"clients": len(shards), "samples": int(sum(len(s) for s in shards))}


def cmd_gradcheck(cfg: ExperimentConfig, tol: float = 1e-4) -> dict:
    out = _prepare(cfg)
    results = gradcheck.check_layer_kinds(cfg.train.seed)
    # whole network at its configured input size, with a 1-sample batch to keep it quick
    results += gradcheck.check_network(build_model(cfg), batch=2, seed=cfg.train.seed, max_coords=40)
    res = {"passed": all(r.passed(tol) for r in results), "tolerance": tol,
           "checks": {r.name: r.rel_error for r in results}}
    _write_json(out / "gradcheck.json", res)
    return res


def with_overrides(cfg: ExperimentConfig, seed=None, out=None, mode=None) -> ExperimentConfig:
    train = cfg.train
    if seed is not None:
        train = replace(train, seed=seed)
    if mode is not None:
        train = replace(train, mode=mode)
    cfg = replace(cfg, train=train)
    if out is not None:
        cfg = replace(cfg, out_dir=str(out))
    cfg.train.validate()
    return cfg
