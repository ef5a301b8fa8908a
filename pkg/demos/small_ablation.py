"""Run the four-arm ablation in a small world and print the lift table.

    python demos/small_ablation.py --users 2000 --seeds 0 1 2

Small worlds finish in a few minutes but are noisier than the full-size
run in the acceptance tests.
"""

import argparse
import dataclasses

from idembed.pipeline import ExperimentConfig, run_ablation


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--users", type=int, default=2000)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    args = ap.parse_args()

    base = ExperimentConfig()
    g = base.generator
    gen = dataclasses.replace(g, n_users=args.users, n_items=args.users * g.n_items // g.n_users)
    report = run_ablation(dataclasses.replace(base, generator=gen), seeds=args.seeds)
    for r in report.per_seed:
        print(f"seed {r.seed}: " + ", ".join(f"{a} {h:.4f}" for a, h in r.final_hit.items()))
    print(report.table())


if __name__ == "__main__":
    main()
