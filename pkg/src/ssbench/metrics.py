"""Tie-aware AUC, subpopulation slices, and cross-seed aggregation.

AUC is the Mann-Whitney statistic computed from average ranks (O(n log n),
ties get 0.5 credit). Slice AUCs that are undefined because a slice holds a
single class are reported as ``None`` — never as 0 — so that aggregation can
distinguish "absent" from "random".
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace

import numpy as np

CELLS_SCHEMA = "# ssbench-cells v1"
AGGREGATES_SCHEMA = "# ssbench-aggregates v1"

AUC_FIELDS = ("auc_overall", "auc_selected", "auc_nonselected", "auc_identification")
METRIC_FIELDS = AUC_FIELDS + ("deferral_rate",)


class UndefinedAucError(ValueError):
    """AUC requested for labels that do not contain both classes."""


def _average_ranks(x: np.ndarray) -> np.ndarray:
    """1-based ranks with ties replaced by the group mean rank."""
    order = np.argsort(x, kind="mergesort")
    sx = x[order]
    n = x.size
    new_group = np.empty(n, dtype=bool)
    new_group[0] = True
    new_group[1:] = sx[1:] != sx[:-1]
    group_id = np.cumsum(new_group) - 1
    first = np.flatnonzero(new_group)
    counts = np.diff(np.append(first, n))
    avg = first + (counts + 1) / 2.0  # mean of ranks first+1 .. first+count
    ranks = np.empty(n, dtype=float)
    ranks[order] = avg[group_id]
    return ranks


def auc(scores, labels) -> float:
    """Probability that a random positive outranks a random negative.

    Ties contribute 0.5. Raises UndefinedAucError when ``labels`` is
    single-class or empty.
    """
    scores = np.asarray(scores, dtype=float).ravel()
    labels = np.asarray(labels).ravel()
    if scores.shape != labels.shape:
        raise ValueError(f"scores/labels length mismatch: {scores.shape} vs {labels.shape}")
    pos = labels == 1
    n_pos = int(pos.sum())
    n_neg = int(labels.size - n_pos)
    if n_pos == 0 or n_neg == 0:
        raise UndefinedAucError(f"need both classes, got {n_pos} positives / {n_neg} negatives")
    ranks = _average_ranks(scores)
    rank_sum = float(ranks[pos].sum())
    return (rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def auc_or_none(scores, labels) -> float | None:
    """auc(), but absent slices come back as None instead of raising."""
    labels = np.asarray(labels).ravel()
    if labels.size == 0:
        return None
    try:
        return auc(scores, labels)
    except UndefinedAucError:
        return None


def subpop_auc(scores_or_preds, y, s) -> tuple[float | None, float | None, float | None]:
    """(overall, selected, non-selected) AUC triple for one score vector.

    Accepts a raw score array or a list of objects with a ``.score``
    attribute. Slices with one class present are None.
    """
    if len(scores_or_preds) and hasattr(scores_or_preds[0], "score"):
        scores = np.asarray([p.score for p in scores_or_preds], dtype=float)
    else:
        scores = np.asarray(scores_or_preds, dtype=float).ravel()
    y = np.asarray(y).ravel()
    s = np.asarray(s).ravel()
    if not (scores.size == y.size == s.size):
        raise ValueError("scores, y, s must be aligned")
    overall = auc_or_none(scores, y)
    selected = auc_or_none(scores[s == 1], y[s == 1])
    nonselected = auc_or_none(scores[s == 0], y[s == 0])
    return overall, selected, nonselected


@dataclass(frozen=True)
class CellConfig:
    """Identity of one experiment cell, minus the method."""

    dataset_id: str
    n_total: int
    event_rate: float
    nonselect_rate: float
    seed: int
    hp_desc: str = ""

    def group_key(self) -> tuple:
        """Everything but the seed: the aggregation group."""
        return (self.dataset_id, self.n_total, self.event_rate, self.nonselect_rate, self.hp_desc)


@dataclass
class CellResult:
    """One (method, config, seed) evaluation."""

    method: str
    config: CellConfig | None
    auc_overall: float | None
    auc_selected: float | None
    auc_nonselected: float | None
    auc_identification: float | None
    deferral_rate: float
    wall_time: float = 0.0


@dataclass
class AggregateRow:
    """Per-metric mean/std/count over the seeds of one (method, group)."""

    method: str
    group: tuple
    means: dict[str, float | None]
    stds: dict[str, float | None]
    counts: dict[str, int]
    delta_from_oracle: float | None


def _mean_std_count(values: list[float]) -> tuple[float | None, float | None, int]:
    vals = [v for v in values if v is not None]
    n = len(vals)
    if n == 0:
        return None, None, 0
    mean = float(np.mean(vals))
    std = 0.0 if n == 1 else float(np.std(vals, ddof=1))
    return mean, std, n


def aggregate(cells: list[CellResult]) -> list[AggregateRow]:
    """Group by (method, config-minus-seed); mean and sample std per metric.

    delta_from_oracle is the oracle group's mean auc_overall minus this
    group's, None when either side is absent. The oracle group's own delta
    is 0.
    """
    groups: dict[tuple, list[CellResult]] = {}
    for c in cells:
        if c.config is None:
            raise ValueError("cannot aggregate a CellResult without a config")
        groups.setdefault((c.method, c.config.group_key()), []).append(c)

    oracle_means: dict[tuple, float | None] = {}
    for (method, gkey), items in groups.items():
        if method == "oracle":
            oracle_means[gkey], _, _ = _mean_std_count([c.auc_overall for c in items])

    rows = []
    for (method, gkey) in sorted(groups, key=lambda k: (k[1], k[0])):
        items = groups[(method, gkey)]
        means, stds, counts = {}, {}, {}
        for name in METRIC_FIELDS:
            means[name], stds[name], counts[name] = _mean_std_count(
                [getattr(c, name) for c in items]
            )
        om = oracle_means.get(gkey)
        delta = None
        if om is not None and means["auc_overall"] is not None:
            delta = om - means["auc_overall"]
        rows.append(AggregateRow(method, gkey, means, stds, counts, delta))
    return rows


# ---------------------------------------------------------------------------
# CSV round-trip. Floats are written with repr() so parsing them back is
# bit-exact; absent metrics are empty fields.

_CELL_COLUMNS = (
    "dataset",
    "size",
    "event_rate",
    "nonselect_rate",
    "method",
    "seed",
    "hp_desc",
    "auc_overall",
    "auc_selected",
    "auc_nonselected",
    "auc_identification",
    "deferral_rate",
)


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(float(v))  # plain-float repr even for numpy scalars
    return str(v)


def _parse_opt_float(s: str) -> float | None:
    return None if s == "" else float(s)


def cell_sort_key(c: CellResult) -> tuple:
    cfg = c.config
    return (cfg.dataset_id, cfg.n_total, cfg.event_rate, cfg.nonselect_rate, c.method, cfg.seed)


def cells_to_csv(cells: list[CellResult], path) -> None:
    """Write cells sorted by key. wall_time is deliberately not a column so
    repeated runs of the same sweep are byte-identical."""
    ordered = sorted(cells, key=cell_sort_key)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(CELLS_SCHEMA + "\n")
        writer = csv.writer(fh)
        writer.writerow(_CELL_COLUMNS)
        for c in ordered:
            cfg = c.config
            writer.writerow(
                [
                    cfg.dataset_id,
                    cfg.n_total,
                    _fmt(cfg.event_rate),
                    _fmt(cfg.nonselect_rate),
                    c.method,
                    cfg.seed,
                    cfg.hp_desc,
                    _fmt(c.auc_overall),
                    _fmt(c.auc_selected),
                    _fmt(c.auc_nonselected),
                    _fmt(c.auc_identification),
                    _fmt(c.deferral_rate),
                ]
            )


def cells_from_csv(path) -> list[CellResult]:
    with open(path, newline="", encoding="utf-8") as fh:
        schema = fh.readline().rstrip("\n")
        if schema != CELLS_SCHEMA:
            raise ValueError(f"unrecognized cells schema line: {schema!r}")
        reader = csv.DictReader(fh)
        cells = []
        for row in reader:
            cfg = CellConfig(
                dataset_id=row["dataset"],
                n_total=int(row["size"]),
                event_rate=float(row["event_rate"]),
                nonselect_rate=float(row["nonselect_rate"]),
                seed=int(row["seed"]),
                hp_desc=row["hp_desc"],
            )
            cells.append(
                CellResult(
                    method=row["method"],
                    config=cfg,
                    auc_overall=_parse_opt_float(row["auc_overall"]),
                    auc_selected=_parse_opt_float(row["auc_selected"]),
                    auc_nonselected=_parse_opt_float(row["auc_nonselected"]),
                    auc_identification=_parse_opt_float(row["auc_identification"]),
                    deferral_rate=float(row["deferral_rate"]),
                )
            )
    return cells


def aggregates_to_csv(rows: list[AggregateRow], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(AGGREGATES_SCHEMA + "\n")
        writer = csv.writer(fh)
        header = ["dataset", "size", "event_rate", "nonselect_rate", "hp_desc", "method"]
        for name in METRIC_FIELDS:
            header += [f"{name}_mean", f"{name}_std", f"{name}_count"]
        header.append("delta_from_oracle")
        writer.writerow(header)
        for r in rows:
            dataset_id, n_total, event_rate, nonselect_rate, hp_desc = r.group
            out = [dataset_id, n_total, _fmt(event_rate), _fmt(nonselect_rate), hp_desc, r.method]
            for name in METRIC_FIELDS:
                out += [_fmt(r.means[name]), _fmt(r.stds[name]), r.counts[name]]
            out.append(_fmt(r.delta_from_oracle))
            writer.writerow(out)
