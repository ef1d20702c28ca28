"""The benchmark's method arms: fit, predict, evaluate.

Ten arms share one fitting harness. All of them see the same standardized
features (train-split statistics), draw their network seeds from the same
role-hash scheme, and tune over the same grid by risk validation loss, so
arms that are defined as re-readings of another arm's model really are
bit-identical fits:

- oracle / naive      one single-task net trained on selected rows; they
                      differ only in the evaluation slice,
- tnet                naive's risk net plus an independent selection net,
- mtnet / mt_naive    one shared-trunk net with risk and selection heads;
                      mt_naive never defers,
- dann                the multitask net with the selection head's trunk
                      gradient scaled by -lambda (gradient reversal),
- ipw                 selected-row risk net with inverse-propensity weights,
- imputation          risk net on all rows, unselected labels filled in by
                      a donor net trained on selected rows,
- kmm / kliep         selected-row risk net with kernel covariate-shift
                      weights against the full training sample.
"""

from __future__ import annotations

import csv
import hashlib
from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np

from .data import Dataset, standardize_stats
from .metrics import CellConfig, CellResult, auc_or_none
from .nn import (
    DivergenceError,
    HeadData,
    HyperParams,
    MlpSpec,
    TrainedModel,
    dataset_loss,
    train,
)
from .reweight import KernelConfig, ipw_weights, kliep_weights, kmm_weights

PREDICTIONS_SCHEMA = "# ssbench-predictions v1"


class StratumError(RuntimeError):
    """Fit or evaluation needs a selection column / selected rows it lacks."""


class MethodKind(str, Enum):
    ORACLE = "oracle"
    NAIVE = "naive"
    MT_NAIVE = "mt_naive"
    TNET = "tnet"
    MTNET = "mtnet"
    IPW = "ipw"
    IMPUTATION = "imputation"
    KMM = "kmm"
    KLIEP = "kliep"
    DANN = "dann"


METHOD_KINDS = tuple(MethodKind)
MULTITASK_KINDS = frozenset({MethodKind.MTNET, MethodKind.MT_NAIVE, MethodKind.DANN})
DEFERRING_KINDS = frozenset({MethodKind.TNET, MethodKind.MTNET})
SELECTION_AWARE_KINDS = MULTITASK_KINDS | {MethodKind.TNET}


@dataclass(frozen=True)
class TuningGrid:
    """Cartesian grid over trunk widths, head widths, learning rates."""

    hidden_layers: tuple[tuple[int, ...], ...] = ((50,), (100,), (100, 100))
    head_layers: tuple[tuple[int, ...], ...] = ((50,), (100,))
    learning_rates: tuple[float, ...] = (1e-4, 5e-4)

    @classmethod
    def fixed(cls, hidden=(50,), head=(50,), lr=5e-4) -> "TuningGrid":
        return cls((tuple(hidden),), (tuple(head),), (float(lr),))

    def cells(self):
        for hidden in self.hidden_layers:
            for head in self.head_layers:
                for lr in self.learning_rates:
                    yield hidden, head, lr


def hp_desc(hidden, head, lr) -> str:
    h = "x".join(str(w) for w in hidden) or "none"
    g = "x".join(str(w) for w in head) or "none"
    return f"hidden:{h}|head:{g}|lr:{lr:g}"


@dataclass(frozen=True)
class MethodOptions:
    deferral_threshold: float = 0.5
    dann_lambda: float = 1.0
    dann_warmup_frac: float = 0.10
    imputation_soft: bool = False
    kernel: KernelConfig | None = None  # its seed field is re-stamped by fit()
    dropout_rate: float = 0.10
    activation: str = "relu"
    # test hook: a constant (or callable on the raw selected-row features)
    # used in place of the fitted propensity model
    ipw_propensity_override: object = None


@dataclass
class FittedMethod:
    kind: MethodKind
    risk: TrainedModel
    sel: TrainedModel | None
    mu: np.ndarray
    sd: np.ndarray
    options: MethodOptions
    base_seed: int
    hp_desc: str
    meta: dict = field(default_factory=dict)

    @property
    def multitask(self) -> bool:
        return self.kind in MULTITASK_KINDS


@dataclass
class Prediction:
    score: np.ndarray
    deferred: np.ndarray
    selection_score: np.ndarray | None = None


def _role_seed(base_seed: int, role: str) -> int:
    """Stable 63-bit stream id per (run seed, network role); independent of
    the process hash seed so parallel workers agree."""
    digest = hashlib.blake2b(f"{base_seed}:{role}".encode(), digest_size=8).digest()
    return int.from_bytes(digest, "big") >> 1


def _normalize_mean1(w: np.ndarray) -> np.ndarray:
    w = np.asarray(w, dtype=float)
    if np.all(w == w[0]):
        return np.ones_like(w)  # constant/mean(constant) is exactly one
    return w / np.mean(w)


def _full_head(y, mask=None) -> HeadData:
    y = np.asarray(y, dtype=float).ravel()
    m = np.ones(y.size, dtype=bool) if mask is None else np.asarray(mask, dtype=bool).ravel()
    return HeadData(y=y, mask=m, weights=np.ones(y.size))


# ---------------------------------------------------------------------------
# tuning harnesses


def _tune_single(
    role, Xtr, ytr, Xval, yval, hp, grid, options, sample_weights=None, on_batch=None
):
    """Train one single-task net per grid cell; lowest recomputed validation
    loss wins, earlier grid cells win ties. Returns (model, desc, table)."""
    seed = _role_seed(hp.seed, role)
    best = None
    table = []
    last_err = None
    for hidden, head, lr in grid.cells():
        desc = hp_desc(hidden, head, lr)
        spec = MlpSpec(
            input_dim=Xtr.shape[1],
            hidden_layers=hidden,
            head_layers=(("y", tuple(head)),),
            activation=options.activation,
            dropout_rate=options.dropout_rate,
        )
        hp_cell = replace(hp, learning_rate=lr, seed=seed)
        try:
            model = train(
                spec,
                Xtr,
                {"y": HeadData(y=np.asarray(ytr, dtype=float))},
                Xval,
                {"y": HeadData(y=np.asarray(yval, dtype=float))},
                hp_cell,
                sample_weights=sample_weights,
                on_batch=on_batch,
            )
        except DivergenceError as err:
            table.append((desc, float("inf")))
            last_err = err
            continue
        val = dataset_loss(spec, model.params, Xval, {"y": _full_head(yval)})
        table.append((desc, val))
        if best is None or val < best[1]:
            best = (model, val, desc)
    if best is None:
        raise last_err
    return best[0], best[2], table


def _tune_multitask(kind, Xtr, ytr, str_, Xval, yval, sval, hp, grid, options, on_batch=None):
    """One shared-trunk net per grid cell (risk head masked to selected rows,
    selection head on all rows); ranked by risk-head validation loss."""
    seed = _role_seed(hp.seed, "risk")
    scales = None
    if kind is MethodKind.DANN:
        warmup = max(1, round(options.dann_warmup_frac * hp.max_epochs))
        lam = options.dann_lambda

        def scales(epoch, _w=warmup, _l=lam):
            return {"sel": -_l * min(1.0, epoch / _w)}

    risk_val = _full_head(yval, mask=sval == 1)
    best = None
    table = []
    last_err = None
    for hidden, head, lr in grid.cells():
        desc = hp_desc(hidden, head, lr)
        spec = MlpSpec(
            input_dim=Xtr.shape[1],
            hidden_layers=hidden,
            head_layers=(("risk", tuple(head)), ("sel", tuple(head))),
            activation=options.activation,
            dropout_rate=options.dropout_rate,
        )
        hp_cell = replace(hp, learning_rate=lr, seed=seed)
        try:
            model = train(
                spec,
                Xtr,
                {
                    "risk": HeadData(y=np.asarray(ytr, dtype=float), mask=str_ == 1),
                    "sel": HeadData(y=np.asarray(str_, dtype=float)),
                },
                Xval,
                {
                    "risk": HeadData(y=np.asarray(yval, dtype=float), mask=sval == 1),
                    "sel": HeadData(y=np.asarray(sval, dtype=float)),
                },
                hp_cell,
                head_grad_scales=scales,
                on_batch=on_batch,
            )
        except DivergenceError as err:
            table.append((desc, float("inf")))
            last_err = err
            continue
        val = dataset_loss(spec, model.params, Xval, {"risk": risk_val})
        table.append((desc, val))
        if best is None or val < best[1]:
            best = (model, val, desc)
    if best is None:
        raise last_err
    return best[0], best[2], table


# ---------------------------------------------------------------------------
# fitting


def fit(
    kind: MethodKind,
    train_ds: Dataset,
    val_ds: Dataset,
    hp: HyperParams | None = None,
    grid: TuningGrid | None = None,
    options: MethodOptions | None = None,
    batch_loss_hook=None,
) -> FittedMethod:
    """Fit one arm. batch_loss_hook, when given, receives
    (epoch, batch_index, loss) for every training batch of the risk network
    (the shared network for multitask arms)."""
    kind = MethodKind(kind)
    hp = hp or HyperParams()
    grid = grid or TuningGrid()
    options = options or MethodOptions()

    if train_ds.s is None or val_ds.s is None:
        raise StratumError("fitting requires a selection column on train and val")
    sel_tr = train_ds.s == 1
    sel_val = val_ds.s == 1
    if not sel_tr.any():
        raise StratumError("train split has zero selected rows")
    if not sel_val.any():
        raise StratumError("val split has zero selected rows")

    mu, sd = standardize_stats(train_ds.X)
    Xtr = (train_ds.X - mu) / sd
    Xval = (val_ds.X - mu) / sd
    ytr, str_ = train_ds.y, train_ds.s
    yval, sval = val_ds.y, val_ds.s

    meta: dict = {}
    sel_model = None

    if kind in MULTITASK_KINDS:
        risk_model, desc, table = _tune_multitask(
            kind, Xtr, ytr, str_, Xval, yval, sval, hp, grid, options, on_batch=batch_loss_hook
        )
        meta["tuning"] = table

    elif kind in (MethodKind.ORACLE, MethodKind.NAIVE, MethodKind.TNET):
        risk_model, desc, table = _tune_single(
            "risk",
            Xtr[sel_tr],
            ytr[sel_tr],
            Xval[sel_val],
            yval[sel_val],
            hp,
            grid,
            options,
            on_batch=batch_loss_hook,
        )
        meta["tuning"] = table
        if kind is MethodKind.TNET:
            sel_model, sel_desc, sel_table = _tune_single(
                "sel", Xtr, str_, Xval, sval, hp, grid, options
            )
            meta["sel_tuning"] = sel_table
            meta["sel_hp_desc"] = sel_desc

    elif kind is MethodKind.IPW:
        override = options.ipw_propensity_override
        if override is None:
            sel_model, sel_desc, sel_table = _tune_single(
                "sel", Xtr, str_, Xval, sval, hp, grid, options
            )
            meta["sel_tuning"] = sel_table
            meta["sel_hp_desc"] = sel_desc
            propensity = sel_model.predict_proba(Xtr[sel_tr])["y"]
        elif callable(override):
            propensity = np.asarray(override(train_ds.X[sel_tr]), dtype=float).ravel()
        else:
            propensity = np.full(int(sel_tr.sum()), float(override))
        marginal = float(np.mean(sel_tr))
        wv = ipw_weights(propensity, marginal)
        weights = _normalize_mean1(wv.w)
        meta["weights"] = wv.meta
        risk_model, desc, table = _tune_single(
            "risk",
            Xtr[sel_tr],
            ytr[sel_tr],
            Xval[sel_val],
            yval[sel_val],
            hp,
            grid,
            options,
            sample_weights=weights,
            on_batch=batch_loss_hook,
        )
        meta["tuning"] = table

    elif kind is MethodKind.IMPUTATION:
        imputer, imp_desc, imp_table = _tune_single(
            "imputer",
            Xtr[sel_tr],
            ytr[sel_tr],
            Xval[sel_val],
            yval[sel_val],
            hp,
            grid,
            options,
        )
        meta["imputer_tuning"] = imp_table
        meta["imputer_hp_desc"] = imp_desc
        y_aug = np.asarray(ytr, dtype=float).copy()
        unsel = ~sel_tr
        if unsel.any():
            p = imputer.predict_proba(Xtr[unsel])["y"]
            y_aug[unsel] = p if options.imputation_soft else (p > 0.5).astype(float)
        meta["n_imputed"] = int(unsel.sum())
        risk_model, desc, table = _tune_single(
            "risk",
            Xtr,
            y_aug,
            Xval[sel_val],
            yval[sel_val],
            hp,
            grid,
            options,
            on_batch=batch_loss_hook,
        )
        meta["tuning"] = table

    elif kind in (MethodKind.KMM, MethodKind.KLIEP):
        cfg = options.kernel or KernelConfig()
        cfg = replace(cfg, seed=_role_seed(hp.seed, "kernel"))
        solver = kmm_weights if kind is MethodKind.KMM else kliep_weights
        wv = solver(Xtr[sel_tr], Xtr, cfg)
        # the engine needs strictly positive weights; a solver zero means
        # "drop the row", which a tiny floor approximates without reshaping
        # the batch structure
        weights = _normalize_mean1(np.maximum(wv.w, 1e-8))
        meta["weights"] = wv.meta
        risk_model, desc, table = _tune_single(
            "risk",
            Xtr[sel_tr],
            ytr[sel_tr],
            Xval[sel_val],
            yval[sel_val],
            hp,
            grid,
            options,
            sample_weights=weights,
            on_batch=batch_loss_hook,
        )
        meta["tuning"] = table

    else:  # pragma: no cover - enum is closed
        raise ValueError(f"unhandled method kind {kind}")

    return FittedMethod(
        kind=kind,
        risk=risk_model,
        sel=sel_model,
        mu=mu,
        sd=sd,
        options=options,
        base_seed=hp.seed,
        hp_desc=desc,
        meta=meta,
    )


# ---------------------------------------------------------------------------
# prediction / evaluation


def predict(fm: FittedMethod, X) -> Prediction:
    """Risk scores for a feature matrix, plus the selection score and the
    deferral mask for the arms that have them. Deferral is strict:
    selection_score < threshold."""
    X = np.asarray(X, dtype=float)
    Xz = (X - fm.mu) / fm.sd
    selection = None
    if fm.multitask:
        probs = fm.risk.predict_proba(Xz)
        score = probs["risk"]
        selection = probs["sel"]
    else:
        score = fm.risk.predict_proba(Xz)["y"]
        if fm.kind is MethodKind.TNET:
            selection = fm.sel.predict_proba(Xz)["y"]
    if fm.kind in DEFERRING_KINDS:
        deferred = selection < fm.options.deferral_threshold
    else:
        deferred = np.zeros(X.shape[0], dtype=bool)
    if fm.kind not in SELECTION_AWARE_KINDS:
        selection = None
    return Prediction(score=score, deferred=deferred, selection_score=selection)


def _eval_mask(kind: MethodKind, s: np.ndarray, deferred: np.ndarray) -> np.ndarray:
    if kind is MethodKind.ORACLE:
        return s == 1
    if kind in DEFERRING_KINDS:
        return ~deferred
    return np.ones(s.size, dtype=bool)


def evaluate(fm: FittedMethod, test_ds: Dataset, config: CellConfig | None = None) -> CellResult:
    """Score a fitted arm on a test split.

    The oracle is scored only on selected rows (its in-distribution slice);
    deferring arms are scored on the rows they keep; everyone else on the
    full split. Subpopulation AUCs are reported within that slice and are
    absent (None) when a slice has a single class or no rows."""
    if test_ds.s is None:
        raise StratumError("evaluation requires a selection column")
    pred = predict(fm, test_ds.X)
    y, s = test_ds.y, test_ds.s
    mask = _eval_mask(fm.kind, s, pred.deferred)

    auc_overall = auc_or_none(pred.score[mask], y[mask])
    m_sel = mask & (s == 1)
    m_non = mask & (s == 0)
    auc_selected = auc_or_none(pred.score[m_sel], y[m_sel])
    auc_nonselected = auc_or_none(pred.score[m_non], y[m_non])
    auc_identification = (
        auc_or_none(pred.selection_score, s) if pred.selection_score is not None else None
    )

    if config is None:
        config = CellConfig(
            dataset_id="adhoc",
            n_total=test_ds.n,
            event_rate=float(np.mean(y)),
            nonselect_rate=float(np.mean(s == 0)),
            seed=fm.base_seed,
            hp_desc=fm.hp_desc,
        )
    return CellResult(
        method=fm.kind.value,
        config=config,
        auc_overall=auc_overall,
        auc_selected=auc_selected,
        auc_nonselected=auc_nonselected,
        auc_identification=auc_identification,
        deferral_rate=float(np.mean(pred.deferred)),
    )


# ---------------------------------------------------------------------------
# prediction export


def export_predictions(fm: FittedMethod, test_ds: Dataset, path) -> None:
    """Per-row CSV (row_id, score, selection_score, deferred, y, s) with a
    schema header naming the arm, so the slice AUCs can be recomputed from
    the file alone."""
    if test_ds.s is None:
        raise StratumError("export requires a selection column")
    pred = predict(fm, test_ds.X)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(f"{PREDICTIONS_SCHEMA} method={fm.kind.value}\n")
        writer = csv.writer(fh)
        writer.writerow(["row_id", "score", "selection_score", "deferred", "y", "s"])
        for i in range(test_ds.n):
            writer.writerow(
                [
                    i,
                    repr(float(pred.score[i])),
                    "" if pred.selection_score is None else repr(float(pred.selection_score[i])),
                    int(pred.deferred[i]),
                    int(test_ds.y[i]),
                    int(test_ds.s[i]),
                ]
            )


def summarize_export(path) -> dict:
    """Recompute the evaluation metrics from an exported prediction file."""
    with open(path, newline="", encoding="utf-8") as fh:
        first = fh.readline().strip()
        if not first.startswith(PREDICTIONS_SCHEMA):
            raise ValueError(f"{path}: missing prediction schema header")
        kind = MethodKind(first.split("method=", 1)[1])
        reader = csv.DictReader(fh)
        rows = list(reader)
    score = np.array([float(r["score"]) for r in rows])
    deferred = np.array([r["deferred"] == "1" for r in rows])
    y = np.array([int(r["y"]) for r in rows])
    s = np.array([int(r["s"]) for r in rows])
    has_sel = all(r["selection_score"] != "" for r in rows)
    sel_score = np.array([float(r["selection_score"]) for r in rows]) if has_sel else None

    mask = _eval_mask(kind, s, deferred)
    m_sel, m_non = mask & (s == 1), mask & (s == 0)
    return {
        "method": kind.value,
        "auc_overall": auc_or_none(score[mask], y[mask]),
        "auc_selected": auc_or_none(score[m_sel], y[m_sel]),
        "auc_nonselected": auc_or_none(score[m_non], y[m_non]),
        "auc_identification": auc_or_none(sel_score, s) if sel_score is not None else None,
        "deferral_rate": float(np.mean(deferred)),
    }
