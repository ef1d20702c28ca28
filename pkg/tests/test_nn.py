"""Network engine tests: forward semantics, gradients, Adam, early stopping,
dropout expectation, determinism, serialization."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ssbench.metrics import auc
from ssbench.nn import (
    AdamState,
    DegenerateDataError,
    DimensionError,
    DivergenceError,
    EarlyStopper,
    GradientReversal,
    HeadData,
    HyperParams,
    MlpSpec,
    TrainedModel,
    _backward_full,
    _forward_full,
    _loss_and_dz,
    _prepare_heads,
    adam_step,
    forward,
    grad_check,
    init_params,
    load_model,
    save_model,
    train,
)


def _zero_model(spec: MlpSpec) -> TrainedModel:
    params = [np.zeros_like(p) for p in init_params(spec, np.random.default_rng(0))]
    return TrainedModel(spec=spec, params=params, history=[], best_epoch=0, seed=0)


def _separable(n=200, seed=0):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, 2))
    margin = X[:, 0] + X[:, 1]
    keep = np.abs(margin) > 0.3
    X = X[keep]
    y = (X[:, 0] + X[:, 1] > 0).astype(np.int8)
    return X, y


# ---------------------------------------------------------------------------
# forward


def test_zero_weights_predict_half():
    spec = MlpSpec(input_dim=3, hidden_layers=(4,), head_layers=(("y", ()), ("s", (2,))))
    model = _zero_model(spec)
    out = model.predict_proba(np.random.default_rng(1).normal(size=(7, 3)))
    for head in ("y", "s"):
        assert np.all(out[head] == 0.5)


def test_single_linear_unit_hand_value():
    # one weight w=1, no bias, input 2.0 -> sigmoid(2)
    spec = MlpSpec(input_dim=1, hidden_layers=(), dropout_rate=0.0)
    model = _zero_model(spec)
    model.params[0][0, 0] = 1.0
    p = model.predict_proba(np.array([[2.0]]))["y"][0]
    assert p == pytest.approx(1.0 / (1.0 + np.exp(-2.0)), abs=1e-12)
    assert p == pytest.approx(0.8808, abs=5e-5)


def test_eval_mode_deterministic_train_mode_not():
    spec = MlpSpec(input_dim=4, hidden_layers=(8,), dropout_rate=0.5)
    rng = np.random.default_rng(2)
    params = init_params(spec, rng)
    model = TrainedModel(spec=spec, params=params, history=[], best_epoch=0, seed=3)
    X = rng.normal(size=(20, 4))
    e1 = forward(model, X, mode="eval")["y"]
    e2 = forward(model, X, mode="eval")["y"]
    assert np.array_equal(e1, e2)
    t1 = forward(model, X, mode="train")["y"]
    t2 = forward(model, X, mode="train")["y"]
    assert not np.array_equal(t1, t2)  # fresh dropout masks per call


def test_forward_rejects_bad_width_and_mode():
    spec = MlpSpec(input_dim=3)
    model = _zero_model(spec)
    with pytest.raises(DimensionError):
        forward(model, np.zeros((2, 4)))
    with pytest.raises(ValueError):
        forward(model, np.zeros((2, 3)), mode="test")


def test_outputs_in_open_unit_interval():
    spec = MlpSpec(input_dim=2, hidden_layers=(6,))
    rng = np.random.default_rng(4)
    model = TrainedModel(spec=spec, params=init_params(spec, rng), history=[], best_epoch=0, seed=0)
    p = model.predict_proba(rng.normal(size=(50, 2)) * 3.0)["y"]
    assert np.all(p > 0.0) and np.all(p < 1.0)


# ---------------------------------------------------------------------------
# spec validation


@pytest.mark.parametrize(
    "kwargs",
    [
        dict(input_dim=0),
        dict(input_dim=2, hidden_layers=(0,)),
        dict(input_dim=2, head_layers=()),
        dict(input_dim=2, head_layers=(("y", (0,)),)),
        dict(input_dim=2, activation="gelu"),
        dict(input_dim=2, dropout_rate=1.0),
    ],
)
def test_bad_specs_rejected(kwargs):
    with pytest.raises(ValueError):
        MlpSpec(**kwargs)


# ---------------------------------------------------------------------------
# gradients


def test_linear_bce_gradient_closed_form():
    # zero params -> p=0.5; dL/dW = X^T (p-y) / n exactly
    spec = MlpSpec(input_dim=2, hidden_layers=(), activation="tanh", dropout_rate=0.0)
    X = np.array([[1.0, 2.0], [-0.5, 0.25], [3.0, -1.0], [0.0, 1.5]])
    y = np.array([1, 0, 1, 0], dtype=np.int8)
    params = [np.zeros((2, 1)), np.zeros(1)]
    heads = _prepare_heads(spec, X, {"y": HeadData(y)}, None, "train")
    probs, cache = _forward_full(spec, params, X, False, np.random.default_rng(0))
    _, head_dz = _loss_and_dz(probs, heads, np.arange(4))
    grads = _backward_full(spec, params, cache, head_dz, {})
    expected_W = X.T @ ((0.5 - y) / 4.0)
    assert np.allclose(grads[0].ravel(), expected_W, atol=1e-12)
    assert grads[1][0] == pytest.approx(np.mean(0.5 - y), abs=1e-12)


def test_zero_input_batch_gradient_structure():
    spec = MlpSpec(input_dim=3, hidden_layers=(), activation="tanh", dropout_rate=0.0)
    X = np.zeros((5, 3))
    y = np.array([1, 0, 1, 0, 1], dtype=np.int8)
    params = [np.zeros((3, 1)), np.zeros(1)]
    heads = _prepare_heads(spec, X, {"y": HeadData(y)}, None, "train")
    probs, cache = _forward_full(spec, params, X, False, np.random.default_rng(0))
    _, head_dz = _loss_and_dz(probs, heads, np.arange(5))
    grads = _backward_full(spec, params, cache, head_dz, {})
    assert np.all(grads[0] == 0.0)  # x=0 kills the weight gradient
    assert grads[1][0] != 0.0


@pytest.mark.parametrize(
    "hidden,heads",
    [
        ((5,), (("y", ()),)),
        ((8, 4), (("y", ()), ("s", (3,)))),
        ((), (("y", (6,)),)),
    ],
)
def test_grad_check_small_nets(hidden, heads):
    spec = MlpSpec(input_dim=4, hidden_layers=hidden, head_layers=heads,
                   activation="tanh", dropout_rate=0.0)
    rng = np.random.default_rng(11)
    X = rng.normal(size=(12, 4))
    hd = {name: HeadData(rng.integers(0, 2, 12).astype(np.int8)) for name in spec.heads}
    assert grad_check(spec, X, hd, epsilon=1e-5, seed=1) < 1e-4


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=15, deadline=None)
def test_grad_check_random_tanh_nets(seed):
    rng = np.random.default_rng(seed)
    n_hidden = int(rng.integers(0, 3))
    hidden = tuple(int(rng.integers(2, 20)) for _ in range(n_hidden))
    spec = MlpSpec(input_dim=int(rng.integers(1, 6)), hidden_layers=hidden,
                   activation="tanh", dropout_rate=0.0)
    X = rng.normal(size=(8, spec.input_dim))
    hd = {"y": HeadData(rng.integers(0, 2, 8).astype(np.int8))}
    assert grad_check(spec, X, hd, epsilon=1e-5, seed=int(seed % 1000)) < 1e-4


# ---------------------------------------------------------------------------
# adam


def test_adam_first_step_hand_example():
    hp = HyperParams(learning_rate=1e-3)
    params = [np.array([0.0])]
    state = AdamState.like(params)
    adam_step(params, [np.array([1.0])], state, hp)
    # m_hat = 1, v_hat = 1 -> delta = -lr / (1 + eps)
    assert params[0][0] == pytest.approx(-1e-3, rel=1e-6)
    assert state.t == 1

    params = [np.array([0.0])]
    adam_step(params, [np.array([-1.0])], AdamState.like(params), hp)
    assert params[0][0] == pytest.approx(+1e-3, rel=1e-6)


def test_adam_zero_gradient_noop():
    hp = HyperParams()
    params = [np.array([1.5, -2.0])]
    state = AdamState.like(params)
    for _ in range(5):
        adam_step(params, [np.zeros(2)], state, hp)
    assert np.array_equal(params[0], np.array([1.5, -2.0]))


def test_adam_rejects_nonfinite_gradient():
    params = [np.array([0.0])]
    with pytest.raises(DivergenceError):
        adam_step(params, [np.array([np.inf])], AdamState.like(params), HyperParams())


# ---------------------------------------------------------------------------
# gradient reversal


def test_gradient_reversal_contract():
    layer = GradientReversal(lam=0.5)
    x = np.array([1.0, -3.0, 7.5])
    assert np.array_equal(layer.forward(x), x)
    assert layer.backward(np.array([2.0]))[0] == -1.0
    assert GradientReversal(lam=0.0).backward(np.array([123.0]))[0] == 0.0
    assert GradientReversal(lam=1.0).backward(np.array([2.0]))[0] == -2.0


# ---------------------------------------------------------------------------
# early stopping


def test_early_stopper_strictly_increasing_sequence():
    # spec example: val loss rising from epoch 1 -> stop after epoch 11
    stopper = EarlyStopper(patience=10)
    epoch = 0
    for epoch in range(1, 100):
        stopper.update(epoch, 1.0 + 0.01 * epoch)
        if stopper.should_stop:
            break
    assert epoch == 11
    assert stopper.best_epoch == 1


def test_early_stopper_tie_keeps_earliest():
    stopper = EarlyStopper(patience=3)
    stopper.update(1, 0.5)
    stopper.update(2, 0.5)  # tie: not an improvement
    assert stopper.best_epoch == 1
    assert stopper.bad == 1


def test_train_stops_at_best_plus_patience():
    X, y = _separable(seed=5)
    hp = HyperParams(learning_rate=5e-3, max_epochs=200, patience=10, seed=8)
    spec = MlpSpec(input_dim=2, hidden_layers=(16,), dropout_rate=0.0)
    # anti-labeled validation: fitting the train set monotonically hurts it
    model = train(spec, X, {"y": HeadData(y)}, X, {"y": HeadData(1 - y)}, hp)
    val = [v for _, v in model.history]
    assert model.best_epoch == int(np.argmin(val)) + 1
    assert len(model.history) == model.best_epoch + hp.patience


# ---------------------------------------------------------------------------
# training behavior


def test_separable_training_auc():
    X, y = _separable()
    hp = HyperParams(learning_rate=5e-4, max_epochs=300, patience=30, seed=0)
    spec = MlpSpec(input_dim=2, hidden_layers=(50,))
    model = train(spec, X, {"y": HeadData(y)}, X, {"y": HeadData(y)}, hp)
    assert auc(model.predict_proba(X)["y"], y) >= 0.99


def test_uniformly_doubled_weights_keep_ranking():
    rng = np.random.default_rng(13)
    X = rng.normal(size=(60, 3))
    y = (X @ np.array([1.0, -0.5, 0.25]) + 0.1 * rng.normal(size=60) > 0).astype(np.int8)
    hp = HyperParams(learning_rate=5e-4, max_epochs=25, patience=25, seed=21)
    spec = MlpSpec(input_dim=3, hidden_layers=(8,), dropout_rate=0.0)
    m1 = train(spec, X, {"y": HeadData(y)}, X, {"y": HeadData(y)}, hp)
    m2 = train(spec, X, {"y": HeadData(y, weights=np.full(60, 2.0))}, X,
               {"y": HeadData(y)}, hp)
    p1 = m1.predict_proba(X)["y"]
    p2 = m2.predict_proba(X)["y"]
    assert np.array_equal(np.argsort(p1, kind="mergesort"), np.argsort(p2, kind="mergesort"))


def test_uniform_weight_scale_first_step_invariance():
    # Adam's first step is sign-normalized, so doubling every weight moves
    # parameters identically up to epsilon-order terms
    rng = np.random.default_rng(17)
    X = rng.normal(size=(32, 2))
    y = rng.integers(0, 2, 32).astype(np.int8)
    spec = MlpSpec(input_dim=2, hidden_layers=(4,), dropout_rate=0.0)
    hp = HyperParams(learning_rate=1e-3, batch_size=32, max_epochs=1, patience=5, seed=2)
    m1 = train(spec, X, {"y": HeadData(y)}, X, {"y": HeadData(y)}, hp)
    m2 = train(spec, X, {"y": HeadData(y, weights=np.full(32, 2.0))}, X,
               {"y": HeadData(y)}, hp)
    for p1, p2 in zip(m1.params, m2.params):
        assert np.allclose(p1, p2, atol=1e-6)


def test_training_determinism():
    X, y = _separable(seed=9)
    hp = HyperParams(max_epochs=15, patience=15, seed=33)
    spec = MlpSpec(input_dim=2, hidden_layers=(10,), dropout_rate=0.10)
    m1 = train(spec, X, {"y": HeadData(y)}, X, {"y": HeadData(y)}, hp)
    m2 = train(spec, X, {"y": HeadData(y)}, X, {"y": HeadData(y)}, hp)
    for p1, p2 in zip(m1.params, m2.params):
        assert np.array_equal(p1, p2)
    m3 = train(spec, X, {"y": HeadData(y)}, X, {"y": HeadData(y)},
               HyperParams(max_epochs=15, patience=15, seed=34))
    assert any(not np.array_equal(p1, p3) for p1, p3 in zip(m1.params, m3.params))


def test_best_epoch_weights_replay_bit_exact():
    X, y = _separable(seed=6)
    rng = np.random.default_rng(7)
    Xv = rng.normal(size=(40, 2))
    yv = rng.integers(0, 2, 40).astype(np.int8)  # noisy val so best < last
    hp = HyperParams(learning_rate=2e-3, max_epochs=40, patience=8, seed=5)
    spec = MlpSpec(input_dim=2, hidden_layers=(6,), dropout_rate=0.0)
    full = train(spec, X, {"y": HeadData(y)}, Xv, {"y": HeadData(yv)}, hp)
    assert full.best_epoch < len(full.history)
    truncated = train(spec, X, {"y": HeadData(y)}, Xv, {"y": HeadData(yv)},
                      HyperParams(learning_rate=2e-3, max_epochs=full.best_epoch,
                                  patience=8, seed=5))
    for pf, pt in zip(full.params, truncated.params):
        assert np.array_equal(pf, pt)


def test_multitask_heads_train_with_masks():
    rng = np.random.default_rng(23)
    X = rng.normal(size=(80, 3))
    y = (X[:, 0] > 0).astype(np.int8)
    s = (X[:, 1] > 0).astype(np.int8)
    mask = np.zeros(80, bool)
    mask[::2] = True  # y labeled on half the rows only
    spec = MlpSpec(input_dim=3, hidden_layers=(8,), head_layers=(("y", ()), ("s", (4,))))
    hp = HyperParams(max_epochs=10, patience=10, seed=1)
    model = train(spec, X, {"y": HeadData(y, mask=mask), "s": HeadData(s)},
                  X, {"y": HeadData(y, mask=mask), "s": HeadData(s)}, hp)
    out = model.predict_proba(X)
    assert set(out) == {"y", "s"}
    assert all(np.all((0 < out[h]) & (out[h] < 1)) for h in out)


def test_single_class_head_rejected():
    X = np.random.default_rng(0).normal(size=(20, 2))
    spec = MlpSpec(input_dim=2)
    hp = HyperParams(max_epochs=2)
    with pytest.raises(DegenerateDataError):
        train(spec, X, {"y": HeadData(np.ones(20, dtype=np.int8))}, X,
              {"y": HeadData(np.ones(20, dtype=np.int8))}, hp)


def test_nonpositive_sample_weights_rejected():
    X = np.random.default_rng(0).normal(size=(10, 2))
    y = np.arange(10) % 2
    spec = MlpSpec(input_dim=2)
    with pytest.raises(ValueError):
        train(spec, X, {"y": HeadData(y, weights=np.zeros(10))}, X,
              {"y": HeadData(y)}, HyperParams(max_epochs=1))


def test_training_divergence_reports_epoch():
    # an inf feature meets mixed-sign weights: inf - inf = NaN loss
    X = np.zeros((8, 2))
    X[0, 0] = np.inf
    y = np.array([0, 1] * 4, dtype=np.int8)
    spec = MlpSpec(input_dim=2, hidden_layers=(4,), dropout_rate=0.0)
    with pytest.raises(DivergenceError) as exc, np.errstate(invalid="ignore"):
        train(spec, X, {"y": HeadData(y)}, X, {"y": HeadData(y)},
              HyperParams(max_epochs=3, batch_size=8))
    assert exc.value.epoch == 1


# ---------------------------------------------------------------------------
# dropout


def test_dropout_expectation_matches_eval():
    # inverted dropout: E[train-mode pre-sigmoid] = eval pre-sigmoid
    spec = MlpSpec(input_dim=1, hidden_layers=(1,), activation="relu", dropout_rate=0.3)
    params = [np.array([[1.0]]), np.zeros(1), np.array([[1.0]]), np.zeros(1)]
    model = TrainedModel(spec=spec, params=params, history=[], best_epoch=0, seed=99)
    X = np.array([[2.0]])

    def logit(p):
        return np.log(p / (1.0 - p))

    eval_logit = logit(model.predict_proba(X)["y"][0])
    draws = np.array([logit(forward(model, X, mode="train")["y"][0]) for _ in range(10_000)])
    assert abs(draws.mean() - eval_logit) / abs(eval_logit) < 0.02


# ---------------------------------------------------------------------------
# serialization


def test_save_load_round_trip(tmp_path):
    X, y = _separable(seed=3)
    hp = HyperParams(max_epochs=8, patience=8, seed=12)
    spec = MlpSpec(input_dim=2, hidden_layers=(5,), head_layers=(("y", ()), ("s", (3,))))
    s = (X[:, 0] > 0.2).astype(np.int8)
    model = train(spec, X, {"y": HeadData(y), "s": HeadData(s)},
                  X, {"y": HeadData(y), "s": HeadData(s)}, hp)
    path = tmp_path / "model.bin"
    save_model(model, path)
    back = load_model(path)
    assert back.spec == model.spec
    assert back.best_epoch == model.best_epoch
    for p1, p2 in zip(model.params, back.params):
        assert np.array_equal(p1, p2)
    p_orig = model.predict_proba(X)
    p_back = back.predict_proba(X)
    for head in p_orig:
        assert np.array_equal(p_orig[head], p_back[head])


def test_load_rejects_foreign_file(tmp_path):
    path = tmp_path / "junk.bin"
    path.write_bytes(b'{"format": "something else"}\n')
    with pytest.raises(ValueError):
        load_model(path)


def test_load_rejects_truncated_file(tmp_path):
    X, y = _separable(seed=4)
    model = train(MlpSpec(input_dim=2), X, {"y": HeadData(y)}, X, {"y": HeadData(y)},
                  HyperParams(max_epochs=2, patience=2, seed=0))
    path = tmp_path / "model.bin"
    save_model(model, path)
    data = path.read_bytes()
    path.write_bytes(data[:-16])
    with pytest.raises(ValueError):
        load_model(path)
