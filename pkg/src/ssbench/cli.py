"""Command-line front end: dataset generation, single cells, sweeps, plots.

Exit codes: 0 success, 2 unusable configuration or arguments, 3 cell failure
(a failed single cell, or a sweep that finished with failed cells).
"""

import os

# Pin BLAS pools before numpy is imported anywhere below. Results must not
# depend on reduction order, so worker parallelism comes from processes
# (SSB_BENCH_THREADS / --parallelism), never BLAS threads.
for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

import argparse
import dataclasses
import json
import sys

from . import __version__
from .data import (
    CalibrationError,
    CsvParseError,
    GenSpec,
    ProjectionError,
    SchemaError,
    StratificationError,
    gen_synthetic,
    save_csv,
)
from .metrics import METRIC_FIELDS, cells_to_csv
from .plots import SUMMARY_KINDS, render_heatmap, render_summary
from .sweep import (
    ENV_THREADS,
    CellSpec,
    ConfigError,
    DatasetSpec,
    SweepConfig,
    run_cell,
    sweep,
)

_CONFIG_EXAMPLE = """\
sweep config (JSON), all keys optional:
  {
    "datasets": [{"dataset_id": "synthetic", "kind": "synthetic"},
                 {"dataset_id": "diabetes", "kind": "csv",
                  "path": "diabetes.csv", "outcome_column": "Diabetes_binary"}],
    "sizes": [1000, 2000, 3000, 4000, 5000],
    "event_rates": [0.05, 0.1, 0.2, 0.3, 0.4],
    "nonselect_rates": [0.05, 0.1, 0.2, 0.3, 0.4],
    "methods": ["oracle", "naive", "tnet", "mtnet", "kmm", "kliep"],
    "seeds": [0, 1, 2, 3, 4, 5, 6, 7, 8, 9],
    "hidden_layers": [[50], [100], [100, 100]],
    "head_layers": [[50], [100]],
    "learning_rates": [0.0001, 0.0005],
    "batch_size": 64, "max_epochs": 1000, "patience": 10,
    "parallelism": 4
  }
%s overrides parallelism when set.""" % ENV_THREADS


def _parse_widths(text: str) -> tuple:
    """Comma list of layer stacks: "50,100x100" -> ((50,), (100, 100))."""
    out = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        if part == "none":
            out.append(())
            continue
        try:
            out.append(tuple(int(w) for w in part.split("x")))
        except ValueError:
            raise ConfigError(f"bad layer widths {part!r}; use forms like 50, 100x100, none") from None
    if not out:
        raise ConfigError("empty layer list")
    return tuple(out)


def _parse_floats(text: str) -> tuple:
    try:
        return tuple(float(part) for part in text.split(",") if part.strip())
    except ValueError:
        raise ConfigError(f"bad float list {text!r}") from None


def _metric_line(result) -> str:
    parts = []
    for name in METRIC_FIELDS:
        v = getattr(result, name)
        parts.append(f"{name}={'absent' if v is None else f'{v:.4f}'}")
    return "  ".join(parts)


def _cmd_generate(args) -> int:
    spec = GenSpec(
        n_total=args.n,
        event_rate=args.event_rate,
        nonselect_rate=args.nonselect_rate,
        n_features=args.features,
        flip_rate=args.flip_rate,
        seed=args.seed,
    )
    ds = gen_synthetic(spec)
    save_csv(ds, args.out)
    sel = ds.s == 1
    print(
        f"wrote {ds.n} rows x {ds.d} features -> {args.out} "
        f"(event rate {ds.y[sel].mean():.4f} among selected, "
        f"non-selection rate {1.0 - sel.mean():.4f})"
    )
    return 0


def _dataset_spec(args) -> DatasetSpec:
    if args.csv is not None:
        if args.outcome_column is None:
            raise ConfigError("--csv needs --outcome-column")
        return DatasetSpec(
            args.dataset_id or os.path.splitext(os.path.basename(args.csv))[0],
            kind="csv",
            path=args.csv,
            outcome_column=args.outcome_column,
        )
    return DatasetSpec(args.dataset_id or "synthetic")


def _cmd_run(args) -> int:
    dataset = _dataset_spec(args)
    config = SweepConfig(
        datasets=(dataset,),
        sizes=(args.size,),
        event_rates=(args.event_rate,),
        nonselect_rates=(args.nonselect_rate,),
        methods=(args.method,),
        seeds=(args.seed_index,),
        hidden_layers=_parse_widths(args.hidden),
        head_layers=_parse_widths(args.head),
        learning_rates=_parse_floats(args.lr),
        batch_size=args.batch_size,
        max_epochs=args.max_epochs,
        patience=args.patience,
    )
    cell = CellSpec(
        dataset=dataset,
        size=args.size,
        event_rate=args.event_rate,
        nonselect_rate=args.nonselect_rate,
        method=args.method,
        seed_index=args.seed_index,
    )
    try:
        result = run_cell(cell, config)
    except (ConfigError, CsvParseError, SchemaError, FileNotFoundError):
        raise  # configuration-shaped: handled by main() as exit 2
    except Exception as exc:  # same isolation boundary as sweep()
        print(f"cell {cell.cell_id} failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 3
    print(f"{cell.cell_id}  hp={result.config.hp_desc}")
    print(_metric_line(result))
    if args.out:
        cells_to_csv([result], args.out)
        print(f"wrote {args.out}")
    return 0


def _cmd_sweep(args) -> int:
    try:
        with open(args.config, encoding="utf-8") as fh:
            raw = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{args.config} is not valid JSON: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{args.config} must hold a JSON object")
    config = SweepConfig.from_dict(raw)
    if args.parallelism is not None:
        if args.parallelism < 1:
            raise ConfigError("--parallelism must be >= 1")
        config = dataclasses.replace(config, parallelism=args.parallelism)
    outcome = sweep(config, args.out)
    if outcome.n_failed:
        for cell_id, error in sorted(outcome.failures.items()):
            print(f"failed: {cell_id}: {error}", file=sys.stderr)
        print(f"{outcome.n_failed}/{outcome.n_total} cells failed", file=sys.stderr)
        return 3
    return 0


def _cmd_plot(args) -> int:
    if args.kind == "heatmap":
        if args.method is None:
            raise ConfigError("plot --kind heatmap needs --method")
        out = render_heatmap(args.results, args.out, method=args.method, metric=args.metric)
    else:
        out = render_summary(args.results, args.out, kind=args.kind)
    print(f"wrote {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ssb-bench",
        description="Selection-bias benchmark: synthetic data, method cells, sweeps, SVG plots.",
    )
    parser.add_argument("--version", action="version", version=f"ssb-bench {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("generate", help="emit a synthetic dataset CSV (plus provenance sidecar)")
    gen.add_argument("--out", required=True, help="output CSV path")
    gen.add_argument("--n", type=int, default=1000, help="total rows (default 1000)")
    gen.add_argument("--event-rate", type=float, default=0.10, help="target event rate among selected rows")
    gen.add_argument("--nonselect-rate", type=float, default=0.10, help="target fraction of s=0 rows")
    gen.add_argument("--features", type=int, default=25, help="feature count (default 25)")
    gen.add_argument("--flip-rate", type=float, default=0.01, help="label noise fraction (default 0.01)")
    gen.add_argument("--seed", type=int, default=0)
    gen.set_defaults(func=_cmd_generate)

    run = sub.add_parser("run", help="run one (dataset, size, rates, method, seed) cell")
    run.add_argument("--method", required=True)
    run.add_argument("--size", type=int, default=1000)
    run.add_argument("--event-rate", type=float, default=0.10)
    run.add_argument("--nonselect-rate", type=float, default=0.10)
    run.add_argument("--seed-index", type=int, default=0)
    run.add_argument("--dataset-id", default=None, help="dataset label in outputs")
    run.add_argument("--csv", default=None, help="rebias this CSV instead of generating data")
    run.add_argument("--outcome-column", default=None, help="binary outcome column of --csv")
    run.add_argument("--hidden", default="50,100,100x100", help="hidden-stack candidates (comma list)")
    run.add_argument("--head", default="50,100", help="head-stack candidates (comma list)")
    run.add_argument("--lr", default="0.0001,0.0005", help="learning-rate candidates (comma list)")
    run.add_argument("--batch-size", type=int, default=64)
    run.add_argument("--max-epochs", type=int, default=1000)
    run.add_argument("--patience", type=int, default=10)
    run.add_argument("--out", default=None, help="also write the result as a one-row CSV")
    run.set_defaults(func=_cmd_run)

    sw = sub.add_parser(
        "sweep",
        help="run a full grid from a JSON config",
        epilog=_CONFIG_EXAMPLE,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    sw.add_argument("--config", required=True, help="JSON sweep config")
    sw.add_argument("--out", required=True, help="output directory (resumable)")
    sw.add_argument("--parallelism", type=int, default=None, help="worker processes (overrides config)")
    sw.set_defaults(func=_cmd_sweep)

    pl = sub.add_parser("plot", help="render an SVG from a results CSV")
    pl.add_argument("--results", required=True, help="results CSV from sweep/run")
    pl.add_argument("--out", required=True, help="output SVG path")
    pl.add_argument("--kind", required=True, choices=("heatmap",) + SUMMARY_KINDS)
    pl.add_argument("--method", default=None, help="method for --kind heatmap")
    pl.add_argument("--metric", default="auc_overall", help="metric for --kind heatmap")
    pl.set_defaults(func=_cmd_plot)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (
        ValueError,  # covers ConfigError, PlotError, CsvParseError, SchemaError, GenSpec checks
        CalibrationError,
        ProjectionError,
        StratificationError,
        OSError,  # unreadable/unwritable paths
    ) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
