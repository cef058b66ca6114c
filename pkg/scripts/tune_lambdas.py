#!/usr/bin/env python3
"""Grid search of the regularizer weights on the benchmark's validation split.

For each seed the baseline is trained once, the hierarchy is mined from its
validation confusion, and every (lambda_pm, lambda_pM, lambda_f) triple is
retrained from scratch. One CSV row per (seed, triple) goes to --out; the
triple with the best median validation mIoU is printed at the end.

    python3 scripts/tune_lambdas.py --seeds 0 1 2 --epochs 20 --out tune.csv
"""

from __future__ import annotations

import argparse
import csv
import itertools
import sys

import numpy as np

from leakseg.experiments import benchmark_splits, epochs_to_fraction
from leakseg.trainer import TrainConfig, evaluate, extract_hierarchy, train_baseline, train_leak

FIELDS = ("seed", "lambda_pm", "lambda_pM", "lambda_f", "miou", "hiou", "sigma", "ccd", "pd", "pcd", "t90")


def _floats(text: str) -> list[float]:
    return [float(x) for x in text.split(",")]


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--epochs", type=int, default=TrainConfig.epochs)
    ap.add_argument("--weighting", default=TrainConfig.weighting, choices=("inverse", "sqrt", "none"))
    ap.add_argument("--pm", type=_floats, default=[0.01, 0.03, 0.1], help="comma-separated lambda_pm grid")
    ap.add_argument("--pM", type=_floats, default=None, help="lambda_pM grid (default: tied to lambda_pm)")
    ap.add_argument("--f", type=_floats, default=[0.5, 1.0, 2.0], help="comma-separated lambda_f grid")
    ap.add_argument("--confusability", type=float, default=None)
    ap.add_argument("--out", default="-")
    args = ap.parse_args(argv)

    if args.pM is None:
        grid = [(p, p, f) for p, f in itertools.product(args.pm, args.f)]
    else:
        grid = list(itertools.product(args.pm, args.pM, args.f))
    data_kw = {} if args.confusability is None else {"confusability": args.confusability}

    fh = sys.stdout if args.out == "-" else open(args.out, "w", newline="")
    writer = csv.DictWriter(fh, fieldnames=FIELDS)
    writer.writeheader()
    scores: dict[tuple, list[float]] = {}
    for seed in args.seeds:
        cat, train, val, _ = benchmark_splits(seed, **data_kw)
        cfg = TrainConfig(epochs=args.epochs, weighting=args.weighting, seed=seed)
        base = train_baseline(cfg.baseline(), train, val, cat.m)
        h, _ = extract_hierarchy(base.model, val, seed=seed)
        runs = [((0.0, 0.0, 0.0), base)]
        for pm, pM, f in grid:
            runs.append(((pm, pM, f), train_leak(cfg.replace(lambda_pm=pm, lambda_pM=pM, lambda_f=f), train, val, h)))
        for lams, res in runs:
            rep = evaluate(res.model, val, h, res.micro_bank)
            row = dict(zip(FIELDS[1:4], lams), seed=seed, miou=rep.miou, hiou=rep.hiou, sigma=rep.sigma,
                       ccd=rep.ccd, pd=rep.pd, pcd=rep.pcd, t90=epochs_to_fraction(res.log.val_series("miou")))
            writer.writerow(row)
            fh.flush()
            scores.setdefault(lams, []).append(rep.miou)
    if fh is not sys.stdout:
        fh.close()

    best = max((k for k in scores if k != (0.0, 0.0, 0.0)), key=lambda k: np.median(scores[k]))
    print(f"best by median val mIoU: lambda_pm={best[0]} lambda_pM={best[1]} lambda_f={best[2]} "
          f"(median {np.median(scores[best]):.4f} vs baseline {np.median(scores[(0.0, 0.0, 0.0)]):.4f})")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
