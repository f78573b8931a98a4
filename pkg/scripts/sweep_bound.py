"""Tabulate the convergence bound over learning rate, local steps and edge rounds.

    python3 scripts/sweep_bound.py --edges 4 --clients-per-edge 25 --out runs/bound_sweep.csv
"""

import argparse
import csv
from pathlib import Path

from phsfl import bound


def main():
    p = argparse.ArgumentParser()
    p.add_argument("--edges", type=int, default=4)
    p.add_argument("--clients-per-edge", type=int, default=25)
    p.add_argument("--beta", type=float, default=1.0)
    p.add_argument("--sigma2", type=float, default=1.0)
    p.add_argument("--eps0-sq", type=float, default=1.0)
    p.add_argument("--eps1-sq", type=float, default=1.0)
    p.add_argument("--delta-f", type=float, default=1.0)
    p.add_argument("--rounds", type=int, default=100)
    p.add_argument("--lrs", type=float, nargs="+", default=[0.001, 0.005, 0.01, 0.02, 0.05])
    p.add_argument("--local-steps", type=int, nargs="+", default=[1, 2, 5, 10])
    p.add_argument("--edge-rounds", type=int, nargs="+", default=[1, 2, 3])
    p.add_argument("--out", type=Path, default=Path("runs/bound_sweep.csv"))
    args = p.parse_args()

    inp = bound.BoundInputs.uniform(args.edges, args.clients_per_edge, beta=args.beta, sigma2=args.sigma2,
                                    eps0_sq=args.eps0_sq, eps1_sq=args.eps1_sq, lr=args.lrs[0], local_steps=1,
                                    edge_rounds=1, T=1, delta_f=args.delta_f)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    with open(args.out, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["lr", "kappa0", "kappa1", "rhs", "admissible"])
        for lr, k0, k1, rhs, ok in bound.sweep(inp, args.lrs, args.local_steps, args.edge_rounds, rounds=args.rounds):
            w.writerow([repr(lr), k0, k1, repr(rhs), int(ok)])
            print(f"lr={lr:<7g} k0={k0:<3d} k1={k1:<3d} rhs={rhs:12.6g} {'ok' if ok else 'inadmissible'}")


if __name__ == "__main__":
    main()
