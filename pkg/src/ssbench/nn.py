"""Minimal dense-network engine with hand-written reverse-mode gradients.

The engine covers exactly what the benchmark needs and nothing else:

* shared-trunk multilayer perceptrons with one or more named sigmoid heads
  (multitask nets attach a risk head and a selection head to one trunk);
* inverted dropout after every hidden activation;
* per-example, per-head loss weights (mean-reduced binary cross-entropy);
* Adam with bias correction;
* early stopping on validation loss with best-epoch weight restore;
* a gradient-scaling connector between each head and the trunk, which is how
  gradient reversal for adversarial training is wired in (scale = -lambda).

Everything is float64 numpy and deterministic given ``HyperParams.seed``: two
trainings with equal seeds produce bit-identical weights.
"""

from __future__ import annotations

import json
from collections.abc import Mapping
from dataclasses import dataclass, field

import numpy as np

ACTIVATIONS = ("relu", "tanh")
PROB_CLAMP = 1e-7  # predicted probabilities are clamped to [1e-7, 1 - 1e-7] in the loss


class DimensionError(ValueError):
    """Batch width does not match the network's input dimension."""


class DegenerateDataError(ValueError):
    """A head was handed single-class training labels."""


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss or gradient."""

    def __init__(self, message: str, epoch: int | None = None):
        super().__init__(message if epoch is None else f"{message} (epoch {epoch})")
        self.epoch = epoch


def _normalize_heads(raw) -> tuple[tuple[str, tuple[int, ...]], ...]:
    if isinstance(raw, Mapping):
        items = raw.items()
    else:
        items = raw
    return tuple((str(name), tuple(int(w) for w in dims)) for name, dims in items)


@dataclass(frozen=True)
class MlpSpec:
    """Architecture: trunk widths, per-head widths, activation, dropout.

    ``head_layers`` maps head name -> extra hidden widths between the trunk
    and that head's single sigmoid output unit (empty tuple = output sits
    directly on the trunk). A plain single-task classifier is the default
    one head named "y" with no extra layers.
    """

    input_dim: int
    hidden_layers: tuple[int, ...] = (50,)
    head_layers: tuple[tuple[str, tuple[int, ...]], ...] = (("y", ()),)
    activation: str = "relu"
    dropout_rate: float = 0.10

    def __post_init__(self):
        object.__setattr__(self, "hidden_layers", tuple(int(w) for w in self.hidden_layers))
        object.__setattr__(self, "head_layers", _normalize_heads(self.head_layers))
        if self.input_dim < 1:
            raise ValueError("input_dim must be >= 1")
        if any(w < 1 for w in self.hidden_layers):
            raise ValueError("hidden layer widths must be positive")
        if not self.head_layers:
            raise ValueError("need at least one head")
        for name, dims in self.head_layers:
            if any(w < 1 for w in dims):
                raise ValueError(f"head {name!r} has a non-positive layer width")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}")
        if not (0.0 <= self.dropout_rate < 1.0):
            raise ValueError("dropout_rate must be in [0, 1)")

    @property
    def heads(self) -> tuple[str, ...]:
        return tuple(name for name, _ in self.head_layers)


@dataclass(frozen=True)
class HyperParams:
    learning_rate: float = 5e-4
    batch_size: int = 64
    max_epochs: int = 1000
    patience: int = 10
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_epsilon: float = 1e-8
    seed: int = 0


@dataclass
class HeadData:
    """Labels for one head: values, row mask, optional positive weights."""

    y: np.ndarray
    mask: np.ndarray | None = None
    weights: np.ndarray | None = None


# --------------------------------------------------------------------------
# parameter layout


def _plan(spec: MlpSpec) -> list[tuple[str, int, int, bool]]:
    """Linear layers in storage order: (owner, fan_in, fan_out, is_output).

    Trunk layers first, then each head's hidden layers followed by its
    1-unit output layer, in spec order.
    """
    layers = []
    width = spec.input_dim
    for w in spec.hidden_layers:
        layers.append(("trunk", width, w, False))
        width = w
    trunk_out = width
    for name, dims in spec.head_layers:
        w = trunk_out
        for h in dims:
            layers.append((name, w, h, False))
            w = h
        layers.append((name, w, 1, True))
    return layers


def init_params(spec: MlpSpec, rng: np.random.Generator) -> list[np.ndarray]:
    """Glorot-uniform weights (±sqrt(6/(fan_in+fan_out))), zero biases.

    Returned as a flat list [W0, b0, W1, b1, ...] in _plan order.
    """
    params: list[np.ndarray] = []
    for _, fan_in, fan_out, _ in _plan(spec):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        params.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
        params.append(np.zeros(fan_out))
    return params


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _activate(z, kind):
    return np.maximum(z, 0.0) if kind == "relu" else np.tanh(z)


def _activation_grad(z, a, kind):
    # relu needs the pre-activation sign; tanh only needs its own output
    return (z > 0).astype(float) if kind == "relu" else 1.0 - a * a


# --------------------------------------------------------------------------
# forward / backward


def _forward_full(spec, params, X, train_mode, dropout_rng):
    """Returns ({head: probs}, cache). Dropout masks are drawn only in train
    mode (inverted scaling by 1/(1-rate)), consuming dropout_rng."""
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[1] != spec.input_dim:
        raise DimensionError(f"expected (*, {spec.input_dim}) batch, got {X.shape}")
    rate = spec.dropout_rate
    use_dropout = train_mode and rate > 0.0

    plan = _plan(spec)
    cache = {"inputs": [], "z": [], "a": [], "mask": []}
    probs: dict[str, np.ndarray] = {}

    h = X
    li = 0
    # trunk; cache["a"] keeps the pre-dropout activation (the tanh gradient
    # needs it), while the next layer consumes the dropped-out version
    while li < len(plan) and plan[li][0] == "trunk":
        W, b = params[2 * li], params[2 * li + 1]
        z = h @ W + b
        a = _activate(z, spec.activation)
        out = a
        mask = None
        if use_dropout:
            mask = (dropout_rng.random(a.shape) >= rate) / (1.0 - rate)
            out = a * mask
        cache["inputs"].append(h)
        cache["z"].append(z)
        cache["a"].append(a)
        cache["mask"].append(mask)
        h = out
        li += 1
    trunk_out = h
    cache["n_trunk"] = li
    cache["trunk_out"] = trunk_out

    # heads
    for name, dims in spec.head_layers:
        h = trunk_out
        for _ in dims:
            W, b = params[2 * li], params[2 * li + 1]
            z = h @ W + b
            a = _activate(z, spec.activation)
            out = a
            mask = None
            if use_dropout:
                mask = (dropout_rng.random(a.shape) >= rate) / (1.0 - rate)
                out = a * mask
            cache["inputs"].append(h)
            cache["z"].append(z)
            cache["a"].append(a)
            cache["mask"].append(mask)
            h = out
            li += 1
        W, b = params[2 * li], params[2 * li + 1]
        z = h @ W + b  # (B, 1)
        cache["inputs"].append(h)
        cache["z"].append(z)
        cache["a"].append(None)
        cache["mask"].append(None)
        probs[name] = _sigmoid(z[:, 0])
        li += 1
    return probs, cache


def _backward_full(spec, params, cache, head_dz, head_scales):
    """Gradients aligned with the flat param list.

    head_dz: {head: dL/dz_out, shape (B,)}. head_scales: multiplier applied
    to each head's gradient where it enters the trunk (1.0 normally; the
    gradient-reversal connector passes -lambda here).
    """
    plan = _plan(spec)
    grads = [np.zeros_like(p) for p in params]
    n_trunk = cache["n_trunk"]
    d_trunk = np.zeros_like(cache["trunk_out"])

    li = n_trunk
    for name, dims in spec.head_layers:
        first = li
        li += len(dims) + 1
        out_idx = li - 1
        dz = head_dz[name][:, None]
        grads[2 * out_idx] = cache["inputs"][out_idx].T @ dz
        grads[2 * out_idx + 1] = dz.sum(axis=0)
        d = dz @ params[2 * out_idx].T
        for j in range(out_idx - 1, first - 1, -1):
            if cache["mask"][j] is not None:
                d = d * cache["mask"][j]
            d = d * _activation_grad(cache["z"][j], cache["a"][j], spec.activation)
            grads[2 * j] = cache["inputs"][j].T @ d
            grads[2 * j + 1] = d.sum(axis=0)
            d = d @ params[2 * j].T
        d_trunk = d_trunk + head_scales.get(name, 1.0) * d

    d = d_trunk
    for j in range(n_trunk - 1, -1, -1):
        if cache["mask"][j] is not None:
            d = d * cache["mask"][j]
        d = d * _activation_grad(cache["z"][j], cache["a"][j], spec.activation)
        grads[2 * j] = cache["inputs"][j].T @ d
        grads[2 * j + 1] = d.sum(axis=0)
        d = d @ params[2 * j].T
    return grads


def _loss_and_dz(probs, heads, idx):
    """Total loss plus dL/dz per head for the rows picked by idx.

    Per head: mean over its masked rows in the batch of w * BCE(p, y); heads
    with no masked rows in the batch contribute zero.
    """
    total = 0.0
    head_dz = {}
    for name, hd in heads.items():
        p = probs[name]
        m = hd.mask[idx]
        dz = np.zeros(p.shape[0])
        k = int(m.sum())
        if k > 0:
            y = hd.y[idx][m]
            w = hd.weights[idx][m]
            pc = np.clip(p[m], PROB_CLAMP, 1.0 - PROB_CLAMP)
            total += float(np.sum(w * -(y * np.log(pc) + (1 - y) * np.log1p(-pc))) / k)
            dz[m] = w * (p[m] - y) / k
        head_dz[name] = dz
    return total, head_dz


def dataset_loss(spec, params, X, heads) -> float:
    """Eval-mode (dropout-free) loss over a whole dataset."""
    probs, _ = _forward_full(spec, params, X, train_mode=False, dropout_rng=None)
    idx = np.arange(X.shape[0])
    loss, _ = _loss_and_dz(probs, heads, idx)
    return loss


# --------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0

    @classmethod
    def like(cls, params):
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params])


def adam_step(params, grads, state, hp: HyperParams):
    """One bias-corrected Adam update, in place; returns (params, state)."""
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise DivergenceError("non-finite gradient")
    state.t += 1
    b1, b2, eps = hp.adam_beta1, hp.adam_beta2, hp.adam_epsilon
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= hp.learning_rate * (m / c1) / (np.sqrt(v / c2) + eps)
    return params, state


# --------------------------------------------------------------------------
# gradient reversal connector


@dataclass(frozen=True)
class GradientReversal:
    """Identity in the forward pass; backward multiplies by -lambda.

    lam=0 blocks the upstream gradient entirely; lam=1 flips its sign.
    """

    lam: float = 1.0

    def forward(self, x):
        return x

    def backward(self, upstream):
        return -self.lam * np.asarray(upstream, dtype=float)


# --------------------------------------------------------------------------
# early stopping


class EarlyStopper:
    """Stop after `patience` consecutive epochs without strict improvement.

    Ties do not count as improvements, so best_epoch is always the earliest
    epoch attaining the minimum validation loss.
    """

    def __init__(self, patience: int):
        self.patience = patience
        self.best = np.inf
        self.best_epoch = 0
        self.bad = 0

    def update(self, epoch: int, val_loss: float) -> bool:
        if val_loss < self.best:
            self.best = val_loss
            self.best_epoch = epoch
            self.bad = 0
            return True
        self.bad += 1
        return False

    @property
    def should_stop(self) -> bool:
        return self.bad >= self.patience


# --------------------------------------------------------------------------
# training


@dataclass
class TrainedModel:
    spec: MlpSpec
    params: list[np.ndarray]
    history: list[tuple[float, float]]  # (train_loss, val_loss) per epoch, epoch 1 first
    best_epoch: int
    seed: int

    def __post_init__(self):
        self._dropout_rng = np.random.default_rng(np.random.SeedSequence([self.seed, 0xD70]))

    def predict_proba(self, X) -> dict[str, np.ndarray]:
        return forward(self, X, mode="eval")


def forward(model: TrainedModel, batch, mode: str = "eval") -> dict[str, np.ndarray]:
    """Per-head probabilities for a batch.

    Eval mode is deterministic; train mode applies inverted dropout drawn
    from the model's own RNG stream (successive calls differ).
    """
    if mode not in ("train", "eval"):
        raise ValueError("mode must be 'train' or 'eval'")
    probs, _ = _forward_full(
        model.spec,
        model.params,
        batch,
        train_mode=(mode == "train"),
        dropout_rng=model._dropout_rng if mode == "train" else None,
    )
    return probs


def _prepare_heads(spec, X, heads, sample_weights, what):
    n = X.shape[0]
    if set(heads) != set(spec.heads):
        raise ValueError(f"{what} heads {sorted(heads)} do not match spec heads {sorted(spec.heads)}")
    if sample_weights is not None and len(spec.heads) != 1:
        raise ValueError("sample_weights shorthand only applies to single-head specs")
    prepared = {}
    for name, hd in heads.items():
        y = np.asarray(hd.y, dtype=float).ravel()
        mask = np.ones(n, dtype=bool) if hd.mask is None else np.asarray(hd.mask, dtype=bool).ravel()
        w = hd.weights
        if w is None and sample_weights is not None:
            w = sample_weights
        w = np.ones(n) if w is None else np.asarray(w, dtype=float).ravel()
        if y.size != n or mask.size != n or w.size != n:
            raise ValueError(f"{what} head {name!r} arrays must have length {n}")
        if np.any(w[mask] <= 0):
            raise ValueError(f"{what} head {name!r} weights must be strictly positive")
        labeled = y[mask]
        if what == "train":
            if labeled.size == 0 or np.all(labeled == labeled[0]):
                raise DegenerateDataError(f"head {name!r} has single-class training labels")
        prepared[name] = HeadData(y=y, mask=mask, weights=w)
    return prepared


def train(
    spec: MlpSpec,
    X,
    heads: Mapping[str, HeadData],
    X_val,
    val_heads: Mapping[str, HeadData],
    hp: HyperParams,
    sample_weights=None,
    head_grad_scales=None,
    on_batch=None,
) -> TrainedModel:
    """Mini-batch Adam with early stopping on total validation loss.

    head_grad_scales: None, a {head: scale} dict, or a callable
    epoch -> {head: scale}; the scale multiplies that head's gradient where
    it enters the trunk (the reversal connector uses -lambda here).
    on_batch: optional callable (epoch, batch_index, loss) for diagnostics.

    The returned model carries the weights of the epoch with the lowest
    validation loss (earliest epoch on ties), restored bit-exactly.
    """
    X = np.asarray(X, dtype=float)
    X_val = np.asarray(X_val, dtype=float)
    if X.ndim != 2 or X.shape[1] != spec.input_dim:
        raise DimensionError(f"train X must be (*, {spec.input_dim}), got {X.shape}")
    if X_val.ndim != 2 or X_val.shape[1] != spec.input_dim:
        raise DimensionError(f"val X must be (*, {spec.input_dim}), got {X_val.shape}")
    heads = _prepare_heads(spec, X, heads, sample_weights, "train")
    val_heads = _prepare_heads(spec, X_val, val_heads, None, "val")

    ss = np.random.SeedSequence(hp.seed)
    s_init, s_shuffle, s_drop = ss.spawn(3)
    params = init_params(spec, np.random.default_rng(s_init))
    shuffle_rng = np.random.default_rng(s_shuffle)
    dropout_rng = np.random.default_rng(s_drop)
    state = AdamState.like(params)

    n = X.shape[0]
    stopper = EarlyStopper(hp.patience)
    history: list[tuple[float, float]] = []
    best_params = [p.copy() for p in params]

    for epoch in range(1, hp.max_epochs + 1):
        if callable(head_grad_scales):
            scales = head_grad_scales(epoch)
        else:
            scales = head_grad_scales or {}
        order = shuffle_rng.permutation(n)
        batch_losses = []
        for bi, start in enumerate(range(0, n, hp.batch_size)):
            idx = order[start : start + hp.batch_size]
            probs, cache = _forward_full(spec, params, X[idx], True, dropout_rng)
            loss, head_dz = _loss_and_dz(probs, heads, idx)
            if not np.isfinite(loss):
                raise DivergenceError("non-finite training loss", epoch=epoch)
            if on_batch is not None:
                on_batch(epoch, bi, loss)
            grads = _backward_full(spec, params, cache, head_dz, scales)
            try:
                params, state = adam_step(params, grads, state, hp)
            except DivergenceError as err:
                raise DivergenceError(str(err), epoch=epoch) from None
            batch_losses.append(loss)
        train_loss = float(np.mean(batch_losses))
        val_loss = dataset_loss(spec, params, X_val, val_heads)
        history.append((train_loss, val_loss))
        if stopper.update(epoch, val_loss):
            best_params = [p.copy() for p in params]
        if stopper.should_stop:
            break

    return TrainedModel(spec=spec, params=best_params, history=history,
                        best_epoch=stopper.best_epoch, seed=hp.seed)


# --------------------------------------------------------------------------
# gradient checking


def _eval_logits(spec, params, X):
    """Eval-mode pre-sigmoid outputs per head, shape (n,)."""
    _, cache = _forward_full(spec, params, X, train_mode=False, dropout_rng=None)
    logits = {}
    li = cache["n_trunk"]
    for name, dims in spec.head_layers:
        li += len(dims) + 1
        logits[name] = cache["z"][li - 1][:, 0]
    return logits


def _loss_extended(spec, params, X, heads):
    """The training loss, with the sigmoid/BCE/mean tail in np.longdouble.

    A central difference subtracts two losses that differ by ~gradient*2eps;
    for parameters with tiny gradients that difference sits below one float64
    ulp of the loss itself, so a float64 evaluation quantizes the quotient
    away. Keeping the matmuls in float64 (their rounding cancels between the
    two evaluations) and widening only the tail resolves the difference.
    """
    logits = _eval_logits(spec, params, X)
    total = np.longdouble(0.0)
    for name, hd in heads.items():
        m = hd.mask
        k = int(m.sum())
        if k == 0:
            continue
        z = logits[name][m].astype(np.longdouble)
        y = hd.y[m].astype(np.longdouble)
        w = hd.weights[m].astype(np.longdouble)
        p = np.clip(1.0 / (1.0 + np.exp(-z)), PROB_CLAMP, 1.0 - PROB_CLAMP)
        total += np.sum(w * -(y * np.log(p) + (1 - y) * np.log1p(-p))) / k
    return total


def grad_check(spec: MlpSpec, X, heads, epsilon: float = 1e-5, seed: int = 0) -> float:
    """Max relative error between analytic and central-difference gradients.

    Requires tanh activation (relu's kink breaks finite differences);
    dropout is ignored because the loss is evaluated in eval mode on both
    routes. The difference quotient uses the extended-precision loss tail
    (see _loss_extended) so the oracle resolves gradients well below one
    float64 ulp of the loss. Relative error per parameter is
    |ga-gf| / max(1e-8, |ga|+|gf|).
    """
    if spec.activation != "tanh":
        raise ValueError("grad_check requires a tanh spec")
    X = np.asarray(X, dtype=float)
    heads = _prepare_heads(spec, X, heads, None, "val")
    params = init_params(spec, np.random.default_rng(seed))
    idx = np.arange(X.shape[0])

    probs, cache = _forward_full(spec, params, X, train_mode=False, dropout_rng=None)
    _, head_dz = _loss_and_dz(probs, heads, idx)
    analytic = _backward_full(spec, params, cache, head_dz, {})

    worst = 0.0
    for arr, ga in zip(params, analytic):
        flat = arr.ravel()
        gflat = ga.ravel()
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + epsilon
            lp = _loss_extended(spec, params, X, heads)
            flat[j] = orig - epsilon
            lm = _loss_extended(spec, params, X, heads)
            flat[j] = orig
            gfd = float((lp - lm) / np.longdouble(2.0 * epsilon))
            rel = abs(gflat[j] - gfd) / max(1e-8, abs(gflat[j]) + abs(gfd))
            worst = max(worst, rel)
    return worst


# --------------------------------------------------------------------------
# serialization: one JSON header line, then raw little-endian float64 data in
# parameter-list order (W0, b0, W1, b1, ...).


def save_model(model: TrainedModel, path) -> None:
    header = {
        "format": "ssbench-weights v1",
        "spec": {
            "input_dim": model.spec.input_dim,
            "hidden_layers": list(model.spec.hidden_layers),
            "head_layers": [[name, list(dims)] for name, dims in model.spec.head_layers],
            "activation": model.spec.activation,
            "dropout_rate": model.spec.dropout_rate,
        },
        "best_epoch": model.best_epoch,
        "seed": model.seed,
        "history": [[float(a), float(b)] for a, b in model.history],
        "shapes": [list(p.shape) for p in model.params],
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        for p in model.params:
            fh.write(np.ascontiguousarray(p, dtype="<f8").tobytes())


def load_model(path) -> TrainedModel:
    with open(path, "rb") as fh:
        header = json.loads(fh.readline().decode("utf-8"))
        if header.get("format") != "ssbench-weights v1":
            raise ValueError("unrecognized weight file format")
        spec = MlpSpec(
            input_dim=header["spec"]["input_dim"],
            hidden_layers=tuple(header["spec"]["hidden_layers"]),
            head_layers=tuple((n, tuple(d)) for n, d in header["spec"]["head_layers"]),
            activation=header["spec"]["activation"],
            dropout_rate=header["spec"]["dropout_rate"],
        )
        params = []
        for shape in header["shapes"]:
            count = int(np.prod(shape)) if shape else 1
            buf = fh.read(count * 8)
            if len(buf) != count * 8:
                raise ValueError("weight file truncated")
            params.append(np.frombuffer(buf, dtype="<f8").astype(float).reshape(shape))
    return TrainedModel(
        spec=spec,
        params=params,
        history=[tuple(pair) for pair in header["history"]],
        best_epoch=header["best_epoch"],
        seed=header["seed"],
    )
