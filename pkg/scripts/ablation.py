"""Desk-scale ablations: loss combinations and stitching factor ranges.

    python3 scripts/ablation.py losses --seeds 0 1 2
    python3 scripts/ablation.py factors --epochs 50

Every row pretrains the micro-ViT on the synthetic shapes fixture and reports
held-out kNN accuracy next to the same seed's random-init features.
"""

import argparse
import json
import sys

import numpy as np

from mos.desk import desk_data, efficacy_run

LOSS_SETS = {
    "full": ("m2s", "m2m", "s2s"),
    "s2s": ("s2s",),
    "m2s": ("m2s",),
    "m2m": ("m2m",),
    "m2s+s2s": ("m2s", "s2s"),
    "m2m+s2s": ("m2m", "s2s"),
}
FACTOR_SETS = {"r1": (1,), "r1,2": (1, 2), "r2": (2,)}


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("sweep", choices=("losses", "factors"))
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--epochs", type=int, default=100)
    ap.add_argument("--only", nargs="+", help="subset of row names")
    ap.add_argument("--json", help="write every run result here")
    args = ap.parse_args(argv)

    data = desk_data()
    rows = LOSS_SETS if args.sweep == "losses" else FACTOR_SETS
    names = args.only or list(rows)
    results = []
    print(f"{'row':10s} {'kNN mean':>9s} {'init mean':>9s}  per seed")
    for name in names:
        if name not in rows:
            sys.exit(f"unknown row {name!r}; choose from {', '.join(rows)}")
        kw = {"losses": rows[name]} if args.sweep == "losses" else {"r_choices": rows[name]}
        runs = [efficacy_run(s, data=data, epochs=args.epochs, **kw) for s in args.seeds]
        results += [dict(row=name, **vars(r)) for r in runs]
        knns = [r.knn for r in runs if r.knn is not None]
        mean = f"{np.mean(knns):9.3f}" if knns else "  aborted"
        seeds = " ".join("abort" if r.knn is None else f"{r.knn:.3f}" for r in runs)
        print(f"{name:10s} {mean} {np.mean([r.random_init_knn for r in runs]):9.3f}  {seeds}", flush=True)
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(results, fh, indent=1)


if __name__ == "__main__":
    main()
