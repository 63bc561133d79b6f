"""GCN vs. zero-layer MIL on the planted-context cohort, with pooled logrank.

    python scripts/run_context_benchmark.py --seeds 0 1 2 --out bench.json
"""

import argparse
import json
import logging

from patchgraph.benchmark import run_seed


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--epochs", type=int, default=20)
    ap.add_argument("--workers", type=int, default=None)
    ap.add_argument("--out", default="")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    rows = []
    for seed in args.seeds:
        r = run_seed(seed, workers=args.workers, epochs=args.epochs)
        row = {
            "seed": seed,
            "gcn_mean_c": r.gcn.mean_c,
            "mil_mean_c": r.mil.mean_c,
            "margin": r.margin,
            "gcn_fold_c": r.gcn.fold_c,
            "mil_fold_c": r.mil.fold_c,
            "gcn_logrank_p": r.gcn.logrank_p(),
            "mil_logrank_p": r.mil.logrank_p(),
            "seconds": r.gcn.seconds + r.mil.seconds,
        }
        rows.append(row)
        print(json.dumps(row))
    if args.out:
        with open(args.out, "w") as fh:
            json.dump(rows, fh, indent=2)


if __name__ == "__main__":
    main()
