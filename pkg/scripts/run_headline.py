#!/usr/bin/env python3
"""Run the headline benchmark cell and print a per-method summary table.

One synthetic cell (n=5000, event rate 20%, non-selection rate 20%), ten
seeds per arm, full hyperparameter tuning. This is the configuration behind
the sign-off numbers in tests/test_acceptance.py, extended to every arm.

    python3 scripts/run_headline.py --out runs/headline --parallelism 4

The run directory is resumable: rerunning only executes missing cells.
"""

import argparse
import sys
import time

import numpy as np

from ssbench.methods import MethodKind
from ssbench.metrics import cells_from_csv
from ssbench.sweep import DatasetSpec, SweepConfig, sweep

ALL_METHODS = tuple(k.value for k in MethodKind)


def build_config(args) -> SweepConfig:
    return SweepConfig(
        datasets=(DatasetSpec("synthetic"),),
        sizes=(args.size,),
        event_rates=(args.event_rate,),
        nonselect_rates=(args.nonselect_rate,),
        methods=tuple(args.methods),
        seeds=tuple(range(args.seeds)),
        hidden_layers=((100, 100),),
        head_layers=((50,),),
        learning_rates=(5e-4,),
        batch_size=64,
        max_epochs=1000,
        patience=10,
        parallelism=args.parallelism,
    )


def summarize(results_path: str, methods) -> str:
    cells = cells_from_csv(results_path)
    by_method = {m: [c for c in cells if c.method == m] for m in methods}

    def mean(vals):
        vals = [v for v in vals if v is not None]
        return float(np.mean(vals)) if vals else None

    def fmt(v):
        return f"{v:.4f}" if v is not None else "  --  "

    header = f"{'method':<12} {'overall':>8} {'selected':>8} {'non-sel':>8} {'ident':>8} {'defer':>7}"
    lines = [header, "-" * len(header)]
    for m in methods:
        rows = by_method[m]
        lines.append(
            f"{m:<12} "
            f"{fmt(mean(c.auc_overall for c in rows)):>8} "
            f"{fmt(mean(c.auc_selected for c in rows)):>8} "
            f"{fmt(mean(c.auc_nonselected for c in rows)):>8} "
            f"{fmt(mean(c.auc_identification for c in rows)):>8} "
            f"{fmt(mean(c.deferral_rate for c in rows)):>7}"
        )
    return "\n".join(lines)


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/headline")
    ap.add_argument("--size", type=int, default=5000)
    ap.add_argument("--event-rate", type=float, default=0.20)
    ap.add_argument("--nonselect-rate", type=float, default=0.20)
    ap.add_argument("--seeds", type=int, default=10)
    ap.add_argument("--parallelism", type=int, default=4)
    ap.add_argument("--methods", nargs="+", default=list(ALL_METHODS), choices=ALL_METHODS)
    args = ap.parse_args(argv)

    config = build_config(args)
    t0 = time.perf_counter()
    outcome = sweep(config, args.out)
    elapsed = time.perf_counter() - t0

    print()
    print(summarize(outcome.results_path, args.methods))
    print(f"\n{outcome.n_ok}/{outcome.n_total} cells ok in {elapsed:.0f}s -> {outcome.results_path}")
    if outcome.n_failed:
        for cell_id, err in sorted(outcome.failures.items()):
            print(f"failed: {cell_id}: {err}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
