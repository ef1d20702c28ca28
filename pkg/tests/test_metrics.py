"""AUC against brute force and sklearn, aggregation rules, CSV round-trips."""

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from sklearn.metrics import roc_auc_score

from ssbench.metrics import (
    AUC_FIELDS,
    METRIC_FIELDS,
    CellConfig,
    CellResult,
    UndefinedAucError,
    aggregate,
    aggregates_to_csv,
    auc,
    auc_or_none,
    cells_from_csv,
    cells_to_csv,
    subpop_auc,
)


def brute_force_auc(scores, labels):
    """O(n_pos * n_neg) pairwise count with explicit 0.5 tie credit."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels)
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    wins = (pos[:, None] > neg[None, :]).sum()
    ties = (pos[:, None] == neg[None, :]).sum()
    return (wins + 0.5 * ties) / (pos.size * neg.size)


def test_perfect_separation():
    assert auc([0.9, 0.8, 0.1], [1, 1, 0]) == 1.0


def test_all_tied_scores():
    assert auc([0.5, 0.5], [1, 0]) == 0.5


def test_two_wins_two_losses():
    assert auc([0.2, 0.6, 0.4, 0.8], [0, 1, 1, 0]) == 0.5


def test_reversed_ranking_is_zero():
    assert auc([0.1, 0.9], [1, 0]) == 0.0


def test_single_class_raises():
    with pytest.raises(UndefinedAucError):
        auc([0.3, 0.4], [1, 1])
    with pytest.raises(UndefinedAucError):
        auc([], [])


def test_length_mismatch_raises():
    with pytest.raises(ValueError):
        auc([0.1, 0.2], [1])


def test_auc_or_none_absent_slice():
    assert auc_or_none([0.3, 0.4], [0, 0]) is None
    assert auc_or_none([], []) is None
    assert auc_or_none([0.1, 0.9], [0, 1]) == 1.0


def test_matches_brute_force_with_ties():
    rng = np.random.default_rng(0)
    for trial in range(300):
        n = int(rng.integers(2, 101))
        labels = rng.integers(0, 2, size=n)
        if labels.min() == labels.max():
            labels[0] = 1 - labels[0]
        scores = rng.normal(size=n)
        if trial % 10 < 3:  # ties in ~30% of instances
            scores = np.round(scores, 1)
        assert auc(scores, labels) == brute_force_auc(scores, labels)


def test_matches_sklearn():
    rng = np.random.default_rng(1)
    for _ in range(50):
        n = int(rng.integers(5, 300))
        labels = rng.integers(0, 2, size=n)
        if labels.min() == labels.max():
            labels[0] = 1 - labels[0]
        scores = np.round(rng.normal(size=n), 2)
        assert auc(scores, labels) == pytest.approx(roc_auc_score(labels, scores), abs=1e-12)


def test_random_scores_near_half():
    rng = np.random.default_rng(2)
    n = 10_000
    labels = np.repeat([0, 1], n // 2)
    scores = rng.uniform(size=n)
    assert 0.48 <= auc(scores, labels) <= 0.52


# exact-in-float score grid: integers / 8 survive affine maps without
# introducing or destroying ties
_grid_scores = st.lists(
    st.integers(min_value=-(2**20), max_value=2**20).map(lambda k: k / 8.0),
    min_size=2,
    max_size=60,
)


@given(scores=_grid_scores, data=st.data())
def test_complement_labels_property(scores, data):
    labels = data.draw(
        st.lists(st.integers(0, 1), min_size=len(scores), max_size=len(scores))
    )
    labels = np.asarray(labels)
    if labels.min() == labels.max():
        labels[0] = 1 - labels[0]
    a = auc(scores, labels)
    assert auc(scores, 1 - labels) == pytest.approx(1.0 - a, abs=1e-12)


@given(scores=_grid_scores, data=st.data())
def test_monotone_transform_property(scores, data):
    labels = data.draw(
        st.lists(st.integers(0, 1), min_size=len(scores), max_size=len(scores))
    )
    labels = np.asarray(labels)
    if labels.min() == labels.max():
        labels[0] = 1 - labels[0]
    transformed = [2.0 * v + 1.0 for v in scores]
    assert auc(transformed, labels) == auc(scores, labels)


def test_subpop_auc_slices():
    scores = [0.9, 0.1, 0.8, 0.2, 0.7, 0.6]
    y = [1, 0, 1, 0, 1, 0]
    s = [1, 1, 1, 1, 0, 0]
    overall, selected, nonselected = subpop_auc(scores, y, s)
    assert overall == 1.0 and selected == 1.0 and nonselected == 1.0
    # single-class non-selected slice -> absent
    overall, selected, nonselected = subpop_auc(scores, [1, 0, 1, 0, 1, 1], s)
    assert nonselected is None and selected == 1.0


def _cell(method, seed, overall, nonselected=0.7, hp="h"):
    cfg = CellConfig("synthetic", 1000, 0.1, 0.1, seed, hp)
    return CellResult(
        method=method,
        config=cfg,
        auc_overall=overall,
        auc_selected=overall,
        auc_nonselected=nonselected,
        auc_identification=None,
        deferral_rate=0.0,
    )


def test_aggregate_mean_std():
    rows = aggregate([_cell("naive", 0, 0.8), _cell("naive", 1, 0.9)])
    (row,) = rows
    assert row.means["auc_overall"] == pytest.approx(0.85)
    assert row.stds["auc_overall"] == pytest.approx(0.0707, abs=2e-4)
    assert row.counts["auc_overall"] == 2


def test_aggregate_single_cell_degenerate():
    (row,) = aggregate([_cell("naive", 0, 0.8)])
    assert row.stds["auc_overall"] == 0.0
    assert row.counts["auc_overall"] == 1


def test_aggregate_absent_excluded_not_zeroed():
    rows = aggregate(
        [_cell("naive", 0, 0.8, nonselected=None), _cell("naive", 1, 0.9, nonselected=0.6)]
    )
    (row,) = rows
    assert row.means["auc_nonselected"] == pytest.approx(0.6)
    assert row.counts["auc_nonselected"] == 1
    assert row.counts["auc_overall"] == 2


def test_aggregate_delta_from_oracle():
    rows = aggregate(
        [
            _cell("oracle", 0, 0.95),
            _cell("oracle", 1, 0.97),
            _cell("naive", 0, 0.85),
            _cell("naive", 1, 0.87),
        ]
    )
    by_method = {r.method: r for r in rows}
    assert by_method["oracle"].delta_from_oracle == pytest.approx(0.0)
    assert by_method["naive"].delta_from_oracle == pytest.approx(0.10)


def test_aggregate_delta_absent_without_oracle():
    (row,) = aggregate([_cell("naive", 0, 0.8)])
    assert row.delta_from_oracle is None


def test_aggregate_requires_config():
    bare = CellResult("naive", None, 0.8, 0.8, 0.7, None, 0.0)
    with pytest.raises(ValueError):
        aggregate([bare])


def test_cells_csv_round_trip(tmp_path):
    cells = [
        _cell("naive", 1, 0.8123456789012345, nonselected=None),
        _cell("oracle", 0, 0.95),
    ]
    cells[0].auc_identification = 0.625
    path = tmp_path / "cells.csv"
    cells_to_csv(cells, path)
    text = path.read_text()
    assert text.startswith("# ssbench-cells v1\n")
    assert "wall_time" not in text.splitlines()[1]
    back = cells_from_csv(path)
    assert len(back) == 2
    # writer sorts by cell key (method before seed): naive first
    assert back[1].method == "oracle"
    naive = back[0]
    assert naive.auc_overall == cells[0].auc_overall  # repr() floats: bit-exact
    assert naive.auc_nonselected is None
    assert naive.auc_identification == 0.625
    assert naive.config == cells[0].config


def test_cells_csv_deterministic_bytes(tmp_path):
    cells = [_cell("naive", s, 0.8 + 0.01 * s) for s in range(3)]
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    cells_to_csv(list(reversed(cells)), a)
    cells_to_csv(cells, b)
    assert a.read_bytes() == b.read_bytes()


def test_aggregates_csv_has_all_metric_columns(tmp_path):
    rows = aggregate([_cell("naive", 0, 0.8), _cell("naive", 1, 0.9)])
    path = tmp_path / "agg.csv"
    aggregates_to_csv(rows, path)
    header = path.read_text().splitlines()[1]
    for name in METRIC_FIELDS:
        assert f"{name}_mean" in header and f"{name}_std" in header
    assert "delta_from_oracle" in header


def test_metric_field_names_frozen():
    assert AUC_FIELDS == (
        "auc_overall",
        "auc_selected",
        "auc_nonselected",
        "auc_identification",
    )
    assert METRIC_FIELDS == AUC_FIELDS + ("deferral_rate",)
