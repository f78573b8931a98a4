"""Mean per-client label entropy of Dirichlet partitions for several concentrations.

    python3 scripts/partition_skew.py --alphas 1e6 0.5 0.1 --seeds 50
"""

import argparse

import numpy as np

from phsfl.data import dirichlet_partition, generate_synthetic, label_entropy


def main():
    p = argparse.ArgumentParser()
    p.add_argument("--alphas", type=float, nargs="+", default=[1e6, 1.0, 0.5, 0.1])
    p.add_argument("--clients", type=int, default=10)
    p.add_argument("--classes", type=int, default=10)
    p.add_argument("--samples", type=int, default=1000)
    p.add_argument("--seeds", type=int, default=50)
    args = p.parse_args()

    table = np.zeros((args.seeds, len(args.alphas)))
    for seed in range(args.seeds):
        ds = generate_synthetic(args.classes, args.samples, (2,), seed=seed)
        for j, a in enumerate(args.alphas):
            shards = dirichlet_partition(ds, args.clients, a, seed)
            table[seed, j] = np.mean([label_entropy(ds, s.indices) for s in shards])
    print(f"max entropy ln({args.classes}) = {np.log(args.classes):.4f} nats")
    for j, a in enumerate(args.alphas):
        print(f"alpha={a:<10g} mean entropy {table[:, j].mean():.4f} +- {table[:, j].std():.4f}")


if __name__ == "__main__":
    main()
