"""Desk-scale trend study: augmentation ordering and semi-supervised gain.

Runs paired trials on the desk preset and prints mean ± std per method,
plus per-epoch pseudo-label set sizes for the semi-supervised modes.

    python scripts/desk_trends.py --trials 5 --out runs/desk_trends
"""

import argparse
import csv
from pathlib import Path

import numpy as np
import torch

from rffssl import cli


def main():
    p = argparse.ArgumentParser()
    p.add_argument("--trials", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--out", default="runs/desk_trends")
    p.add_argument("--methods", default="supervised:none,supervised:rotation,supervised:composite,proposal:composite,fixmatch:composite")
    args = p.parse_args()
    torch.set_num_threads(1)

    overrides = {"trials": args.trials, "seed": args.seed}
    if args.epochs:
        overrides["epochs"] = args.epochs
    base = cli.preset("desk", **overrides)
    ds = cli.simulate(base)
    out = Path(args.out)
    rows, growth = [], {}
    for item in args.methods.split(","):
        mode, aug = item.split(":")
        cfg = cli.config_from_dict({"mode": mode, "augmentation": aug}, base)
        name = f"{mode}+{aug}"
        for r in range(base.trials):
            o = cli.run_trial(cfg, ds, r, method=name)
            rows.append(o.row)
            growth.setdefault(name, []).append([e.pseudo_size for e in o.result.log])
            print(f"{name:<24} trial {r}: {o.row.accuracy:.4f} ({o.row.seconds:.0f}s)", flush=True)
    cli.write_rows(out / "trends.csv", rows)
    for s in cli.summarize(rows):
        print(cli.format_summary(s))
    with open(out / "pseudo_sizes.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["method", "epoch", "mean_pseudo_size"])
        for name, runs in growth.items():
            if name.startswith("proposal"):
                for epoch, v in enumerate(np.mean(runs, axis=0), start=1):
                    w.writerow([name, epoch, v])


if __name__ == "__main__":
    main()
