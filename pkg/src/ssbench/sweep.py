"""Benchmark sweep: a grid of (dataset, size, rates, method, seed) cells.

Each cell regenerates its data, fits one arm, and scores it on the held-out
test split. Cell seeds are hashes of the cell coordinates *excluding the
method*, so every arm inside a cell group sees the same dataset, the same
split, and the same role-seeded networks — differences between arms are
differences between methods, not between draws.

Outputs in the run directory:

- cells.jsonl      one line per finished cell, appended as results arrive
                   (the resume log; safe against interruption),
- manifest.json    config hash, tool version, per-cell status and wall time,
- results.csv      every successful cell, sorted by cell coordinates; byte
                   identical for a given config regardless of parallelism
                   or resume history,
- aggregates.csv   per-(group, method) means/stds and oracle deltas.

A rerun with the same config in the same directory re-executes only the
cells that are missing or failed.
"""

from __future__ import annotations

import hashlib
import json
import os
import time
from concurrent.futures import FIRST_COMPLETED, ProcessPoolExecutor, wait
from dataclasses import asdict, dataclass, field, replace

from . import __version__
from .data import GenSpec, gen_synthetic, inject_bias, load_csv, split, subsample_to_event_rate
from .methods import MethodKind, MethodOptions, TuningGrid, evaluate, fit
from .metrics import (
    METRIC_FIELDS,
    CellConfig,
    CellResult,
    aggregate,
    aggregates_to_csv,
    cells_to_csv,
)
from .nn import HyperParams

ENV_THREADS = "SSB_BENCH_THREADS"
MANIFEST_NAME = "manifest.json"
CELLS_LOG_NAME = "cells.jsonl"
RESULTS_NAME = "results.csv"
AGGREGATES_NAME = "aggregates.csv"


class ConfigError(ValueError):
    """Malformed sweep configuration, or a resume against a different config."""


@dataclass(frozen=True)
class DatasetSpec:
    """Either the synthetic generator or a CSV table to rebias."""

    dataset_id: str
    kind: str = "synthetic"  # "synthetic" | "csv"
    path: str | None = None
    outcome_column: str | None = None

    def __post_init__(self):
        if self.kind not in ("synthetic", "csv"):
            raise ConfigError(f"dataset kind must be synthetic or csv, got {self.kind!r}")
        if self.kind == "csv" and (not self.path or not self.outcome_column):
            raise ConfigError("csv datasets need path and outcome_column")


@dataclass(frozen=True)
class SweepConfig:
    datasets: tuple[DatasetSpec, ...] = (DatasetSpec("synthetic"),)
    sizes: tuple[int, ...] = (1000, 2000, 3000, 4000, 5000)
    event_rates: tuple[float, ...] = (0.05, 0.10, 0.20, 0.30, 0.40)
    nonselect_rates: tuple[float, ...] = (0.05, 0.10, 0.20, 0.30, 0.40)
    methods: tuple[str, ...] = tuple(k.value for k in MethodKind)
    seeds: tuple[int, ...] = tuple(range(10))
    hidden_layers: tuple[tuple[int, ...], ...] = ((50,), (100,), (100, 100))
    head_layers: tuple[tuple[int, ...], ...] = ((50,), (100,))
    learning_rates: tuple[float, ...] = (1e-4, 5e-4)
    batch_size: int = 64
    max_epochs: int = 1000
    patience: int = 10
    parallelism: int = 1

    def __post_init__(self):
        for m in self.methods:
            try:
                MethodKind(m)
            except ValueError:
                raise ConfigError(f"unknown method {m!r}") from None
        if not self.sizes or not self.event_rates or not self.nonselect_rates or not self.seeds:
            raise ConfigError("sizes, event_rates, nonselect_rates, seeds must be non-empty")
        if self.parallelism < 1:
            raise ConfigError("parallelism must be >= 1")

    def grid(self) -> TuningGrid:
        return TuningGrid(self.hidden_layers, self.head_layers, self.learning_rates)

    def hyperparams(self) -> HyperParams:
        return HyperParams(
            batch_size=self.batch_size, max_epochs=self.max_epochs, patience=self.patience
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["datasets"] = [asdict(ds) for ds in self.datasets]
        return d

    @classmethod
    def from_dict(cls, raw: dict) -> "SweepConfig":
        known = set(cls.__dataclass_fields__)
        extra = set(raw) - known
        if extra:
            raise ConfigError(f"unknown config keys: {sorted(extra)}")
        kw = dict(raw)
        if "datasets" in kw:
            kw["datasets"] = tuple(
                ds if isinstance(ds, DatasetSpec) else DatasetSpec(**ds) for ds in kw["datasets"]
            )
        for key in ("sizes", "event_rates", "nonselect_rates", "methods", "seeds", "learning_rates"):
            if key in kw:
                kw[key] = tuple(kw[key])
        for key in ("hidden_layers", "head_layers"):
            if key in kw:
                kw[key] = tuple(tuple(layer) for layer in kw[key])
        try:
            return cls(**kw)
        except TypeError as err:
            raise ConfigError(str(err)) from None


def config_hash(config: SweepConfig) -> str:
    blob = json.dumps(config.to_dict(), sort_keys=True)
    return hashlib.blake2b(blob.encode(), digest_size=16).hexdigest()


# ---------------------------------------------------------------------------
# cells


@dataclass(frozen=True)
class CellSpec:
    dataset: DatasetSpec
    size: int
    event_rate: float
    nonselect_rate: float
    method: str
    seed_index: int

    @property
    def cell_id(self) -> str:
        return (
            f"{self.dataset.dataset_id}:{self.size}:{self.event_rate:g}"
            f":{self.nonselect_rate:g}:{self.method}:{self.seed_index}"
        )

    def sort_key(self) -> tuple:
        return (
            self.dataset.dataset_id,
            self.size,
            self.event_rate,
            self.nonselect_rate,
            self.method,
            self.seed_index,
        )


def _h64(*parts) -> int:
    """Stable 63-bit seed from cell coordinates (method never included)."""
    blob = ":".join(repr(p) for p in parts)
    digest = hashlib.blake2b(blob.encode(), digest_size=8).digest()
    return int.from_bytes(digest, "big") >> 1


def _cell_coords(cell: CellSpec) -> tuple:
    return (
        cell.dataset.dataset_id,
        cell.size,
        cell.event_rate,
        cell.nonselect_rate,
        cell.seed_index,
    )


def enumerate_cells(config: SweepConfig) -> list[CellSpec]:
    cells = [
        CellSpec(ds, size, e, nu, method, seed)
        for ds in config.datasets
        for size in config.sizes
        for e in config.event_rates
        for nu in config.nonselect_rates
        for method in config.methods
        for seed in config.seeds
    ]
    cells.sort(key=CellSpec.sort_key)
    return cells


def run_cell(cell: CellSpec, config: SweepConfig) -> CellResult:
    """Generate (or rebias) the cell's data, fit its arm, score the test split."""
    t0 = time.perf_counter()
    coords = _cell_coords(cell)
    data_seed = _h64("data", *coords)
    split_seed = _h64("split", *coords)
    train_seed = _h64("train", *coords)

    if cell.dataset.kind == "synthetic":
        ds = gen_synthetic(
            GenSpec(
                n_total=cell.size,
                event_rate=cell.event_rate,
                nonselect_rate=cell.nonselect_rate,
                seed=data_seed,
            )
        )
    else:
        ds = load_csv(cell.dataset.path, cell.dataset.outcome_column)
        ds = subsample_to_event_rate(ds, cell.size, cell.event_rate, seed=data_seed)
        ds = inject_bias(ds, cell.nonselect_rate, seed=_h64("bias", *coords))

    bundle = split(ds, seed=split_seed)
    hp = replace(config.hyperparams(), seed=train_seed)
    fm = fit(
        MethodKind(cell.method),
        bundle.train,
        bundle.val,
        hp=hp,
        grid=config.grid(),
        options=MethodOptions(),
    )
    result = evaluate(
        fm,
        bundle.test,
        config=CellConfig(
            dataset_id=cell.dataset.dataset_id,
            n_total=cell.size,
            event_rate=cell.event_rate,
            nonselect_rate=cell.nonselect_rate,
            seed=cell.seed_index,
            hp_desc=fm.hp_desc,
        ),
    )
    result.wall_time = time.perf_counter() - t0
    return result


# ---------------------------------------------------------------------------
# result (de)serialization for the cells log


def _result_to_record(cell: CellSpec, result: CellResult) -> dict:
    payload = {f: getattr(result, f) for f in METRIC_FIELDS}
    payload["hp_desc"] = result.config.hp_desc
    return {
        "cell_id": cell.cell_id,
        "status": "ok",
        "wall_time": result.wall_time,
        "result": payload,
    }


def _record_to_result(cell: CellSpec, record: dict) -> CellResult:
    payload = record["result"]
    return CellResult(
        method=cell.method,
        config=CellConfig(
            dataset_id=cell.dataset.dataset_id,
            n_total=cell.size,
            event_rate=cell.event_rate,
            nonselect_rate=cell.nonselect_rate,
            seed=cell.seed_index,
            hp_desc=payload["hp_desc"],
        ),
        auc_overall=payload["auc_overall"],
        auc_selected=payload["auc_selected"],
        auc_nonselected=payload["auc_nonselected"],
        auc_identification=payload["auc_identification"],
        deferral_rate=payload["deferral_rate"],
        wall_time=record.get("wall_time", 0.0),
    )


# ---------------------------------------------------------------------------
# orchestration


@dataclass
class SweepOutcome:
    out_dir: str
    n_total: int
    n_ok: int
    n_failed: int
    n_reused: int
    results_path: str
    aggregates_path: str
    failures: dict[str, str] = field(default_factory=dict)


def resolve_parallelism(config: SweepConfig) -> int:
    env = os.environ.get(ENV_THREADS)
    if env is not None:
        try:
            value = int(env)
        except ValueError:
            raise ConfigError(f"{ENV_THREADS} must be an integer, got {env!r}") from None
        if value < 1:
            raise ConfigError(f"{ENV_THREADS} must be >= 1")
        return value
    return config.parallelism


def _load_cells_log(path) -> dict[str, dict]:
    records: dict[str, dict] = {}
    if not os.path.exists(path):
        return records
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                rec = json.loads(line)
                records[rec["cell_id"]] = rec  # later lines win
    return records


def sweep(config: SweepConfig, out_dir: str, log=print) -> SweepOutcome:
    """Run (or resume) every cell of the grid and write the run directory."""
    os.makedirs(out_dir, exist_ok=True)
    manifest_path = os.path.join(out_dir, MANIFEST_NAME)
    log_path = os.path.join(out_dir, CELLS_LOG_NAME)
    chash = config_hash(config)

    if os.path.exists(manifest_path):
        with open(manifest_path, encoding="utf-8") as fh:
            manifest = json.load(fh)
        if manifest.get("config_hash") != chash:
            raise ConfigError(
                f"{out_dir} holds a different sweep (config hash "
                f"{manifest.get('config_hash')}, this config {chash}); "
                "use a fresh directory"
            )

    cells = enumerate_cells(config)
    by_id = {c.cell_id: c for c in cells}
    records = _load_cells_log(log_path)
    done = {cid: rec for cid, rec in records.items() if rec.get("status") == "ok" and cid in by_id}
    pending = [c for c in cells if c.cell_id not in done]
    workers = resolve_parallelism(config)
    log(
        f"{len(cells)} cells ({len(done)} already done, {len(pending)} to run) "
        f"with parallelism {workers}"
    )

    failures: dict[str, str] = {}
    results: dict[str, CellResult] = {
        cid: _record_to_result(by_id[cid], rec) for cid, rec in done.items()
    }

    def record_line(rec: dict):
        with open(log_path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")

    if pending:
        if workers == 1:
            for cell in pending:
                try:
                    result = run_cell(cell, config)
                except Exception as err:  # noqa: BLE001 - cell isolation is the point
                    failures[cell.cell_id] = f"{type(err).__name__}: {err}"
                    record_line(
                        {"cell_id": cell.cell_id, "status": "failed", "error": failures[cell.cell_id]}
                    )
                    log(f"FAILED {cell.cell_id}: {failures[cell.cell_id]}")
                    continue
                results[cell.cell_id] = result
                record_line(_result_to_record(cell, result))
        else:
            with ProcessPoolExecutor(max_workers=workers) as pool:
                futures = {pool.submit(run_cell, cell, config): cell for cell in pending}
                outstanding = set(futures)
                while outstanding:
                    finished, outstanding = wait(outstanding, return_when=FIRST_COMPLETED)
                    for fut in finished:
                        cell = futures[fut]
                        try:
                            result = fut.result()
                        except Exception as err:  # noqa: BLE001
                            failures[cell.cell_id] = f"{type(err).__name__}: {err}"
                            record_line(
                                {
                                    "cell_id": cell.cell_id,
                                    "status": "failed",
                                    "error": failures[cell.cell_id],
                                }
                            )
                            log(f"FAILED {cell.cell_id}: {failures[cell.cell_id]}")
                            continue
                        results[cell.cell_id] = result
                        record_line(_result_to_record(cell, result))

    ordered = [results[c.cell_id] for c in cells if c.cell_id in results]
    results_path = os.path.join(out_dir, RESULTS_NAME)
    aggregates_path = os.path.join(out_dir, AGGREGATES_NAME)
    cells_to_csv(ordered, results_path)
    aggregates_to_csv(aggregate(ordered), aggregates_path)

    manifest = {
        "tool": "ssbench",
        "tool_version": __version__,
        "config": config.to_dict(),
        "config_hash": chash,
        "cells": {
            c.cell_id: (
                {
                    "status": "ok",
                    "wall_time": results[c.cell_id].wall_time,
                    "hp_desc": results[c.cell_id].config.hp_desc,
                }
                if c.cell_id in results
                else {"status": "failed", "error": failures.get(c.cell_id, "not run")}
            )
            for c in cells
        },
        "n_ok": len(results),
        "n_failed": len(cells) - len(results),
        "artifacts": {
            "results_csv": RESULTS_NAME,
            "aggregates_csv": AGGREGATES_NAME,
            "cells_log": CELLS_LOG_NAME,
        },
    }
    with open(manifest_path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")

    log(f"{len(results)}/{len(cells)} cells ok -> {results_path}")
    return SweepOutcome(
        out_dir=out_dir,
        n_total=len(cells),
        n_ok=len(results),
        n_failed=len(cells) - len(results),
        n_reused=len(done),
        results_path=results_path,
        aggregates_path=aggregates_path,
        failures=failures,
    )
