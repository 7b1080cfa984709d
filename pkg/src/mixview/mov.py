"""The gated mixture-of-views model.

A gating network maps the concatenation of all views to a distribution over
views; per-view expert networks map their own view to class distributions;
the mixture prediction is the gate-weighted average of expert distributions.
Training maximizes the mixture log-likelihood plus a lambda-weighted sum of
standalone per-view log-likelihoods, via hand-derived backprop and Adam.
"""

from __future__ import annotations

import copy
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import nn
from .nn import (
    AdamState,
    ConfigError,
    MLPParams,
    NumericError,
    ShapeError,
    log_softmax,
    mlp_backward,
    mlp_forward,
    softmax,
)

CHECKPOINT_MAGIC = b"MOV1"


@dataclass(frozen=True)
class MoVParams:
    gate: MLPParams
    experts: tuple[MLPParams, ...]

    def __post_init__(self):
        m = len(self.experts)
        if m < 1:
            raise ConfigError("need at least one expert")
        if self.gate.output_size != m:
            raise ConfigError(
                f"gate outputs {self.gate.output_size} logits for {m} experts"
            )
        total = sum(e.input_size for e in self.experts)
        if self.gate.input_size != total:
            raise ConfigError(
                f"gate input {self.gate.input_size} != total view length {total}"
            )
        k = self.experts[0].output_size
        if any(e.output_size != k for e in self.experts):
            raise ConfigError("all experts must share the class count")
        if k < 2:
            raise ConfigError("need at least two classes")

    @property
    def m(self) -> int:
        return len(self.experts)

    @property
    def k(self) -> int:
        return self.experts[0].output_size

    @property
    def view_dims(self) -> tuple[int, ...]:
        return tuple(e.input_size for e in self.experts)


@dataclass(frozen=True)
class MoVPrediction:
    gate_weights: np.ndarray   # (m,)
    expert_dists: np.ndarray   # (m, k)
    mixture_dist: np.ndarray   # (k,)


@dataclass(frozen=True)
class PosteriorWeights:
    w: np.ndarray  # (m,)


@dataclass
class TrainConfig:
    lam: float = 1.0
    max_epochs: int = 500
    batch_size: int | None = None          # None = full batch
    learning_rate: float = 1e-3
    gate_learning_rate: float | None = None    # None = same as learning_rate
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    plateau_patience: int = 10
    plateau_factor: float = 0.5
    early_stop_patience: int = 50
    dropout_rate: float = 0.0
    gate_dropout: bool = True              # mirror expert dropout in the gate
    freeze_gate: bool = False              # keep gate at its initial values
    seed: int = 0

    def __post_init__(self):
        if self.lam < 0:
            raise ConfigError("lambda must be non-negative")
        if not 0.0 < self.plateau_factor < 1.0:
            raise ConfigError("plateau_factor must be in (0,1)")
        if self.plateau_patience < 1 or self.early_stop_patience < 1:
            raise ConfigError("patience values must be >= 1")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError("dropout_rate must be in [0,1)")


@dataclass
class TrainHistory:
    train_loss: list[float] = field(default_factory=list)  # NLL-per-sample scale
    val_loss: list[float] = field(default_factory=list)
    learning_rate: list[float] = field(default_factory=list)
    best_epoch: int = -1


def init_mov(
    view_dims,
    n_classes: int,
    expert_hidden=(24, 24),
    gate_hidden=(3, 3),
    seed: int = 0,
) -> MoVParams:
    """Fresh model: one expert per view plus a gate over the concatenation.

    Expert and gate seeds are derived from the master seed so distinct
    networks never share initial weights.
    """
    view_dims = tuple(int(d) for d in view_dims)
    m = len(view_dims)
    ss = np.random.SeedSequence(seed)
    seeds = ss.generate_state(m + 1)
    gate = nn.init_mlp([sum(view_dims), *gate_hidden, m], int(seeds[0]))
    experts = tuple(
        nn.init_mlp([view_dims[i], *expert_hidden, n_classes], int(seeds[i + 1]))
        for i in range(m)
    )
    return MoVParams(gate=gate, experts=experts)


def _check_views(params: MoVParams, views) -> list[np.ndarray]:
    if len(views) != params.m:
        raise ShapeError(f"got {len(views)} views, model has {params.m}")
    out = []
    for i, (v, d) in enumerate(zip(views, params.view_dims)):
        v = np.asarray(v, dtype=np.float64)
        if v.shape[-1] != d:
            raise ShapeError(f"view {i} has length {v.shape[-1]}, expected {d}")
        out.append(v)
    return out


@dataclass
class MoVCaches:
    gate: nn.ForwardCache
    experts: list[nn.ForwardCache]
    log_gate: np.ndarray     # (n, m)
    log_expert: np.ndarray   # (n, m, k)


def forward_batch(
    params: MoVParams,
    views: list[np.ndarray],
    mode: str = "infer",
    dropout_rate: float = 0.0,
    gate_dropout: bool = True,
    rng: np.random.Generator | None = None,
    masks: dict | None = None,
) -> MoVCaches:
    """Run gate and experts on a batch, returning log-distributions and the
    per-network forward caches.

    ``masks`` (keys "gate", ("expert", i)) pins dropout masks for exact
    re-evaluation; otherwise train-mode masks come from ``rng``.
    """
    views = _check_views(params, [np.atleast_2d(v) for v in views])
    x_cat = np.concatenate(views, axis=1)
    gate_mode = mode if gate_dropout else "infer"
    gate_logits, gate_cache = mlp_forward(
        params.gate, x_cat, gate_mode, dropout_rate, rng,
        masks.get("gate") if masks else None,
    )
    log_gate = log_softmax(gate_logits)
    expert_caches = []
    log_expert = np.empty((x_cat.shape[0], params.m, params.k))
    for i, expert in enumerate(params.experts):
        logits, cache = mlp_forward(
            expert, views[i], mode, dropout_rate, rng,
            masks.get(("expert", i)) if masks else None,
        )
        expert_caches.append(cache)
        log_expert[:, i, :] = log_softmax(logits)
    return MoVCaches(gate_cache, expert_caches, log_gate, log_expert)


def collect_masks(caches: MoVCaches) -> dict:
    """Extract the dropout masks a forward pass drew, for pinned replay."""
    masks = {"gate": caches.gate.dropout_masks}
    for i, c in enumerate(caches.experts):
        masks[("expert", i)] = c.dropout_masks
    return masks


def forward(
    params: MoVParams,
    views,
    mode: str = "infer",
    dropout_rate: float = 0.0,
    rng: np.random.Generator | None = None,
) -> MoVPrediction:
    """Mixture prediction for a single sample."""
    caches = forward_batch(params, views, mode, dropout_rate, rng=rng)
    gate_w = np.exp(caches.log_gate[0])
    expert_d = np.exp(caches.log_expert[0])
    mixture = gate_w @ expert_d
    return MoVPrediction(gate_weights=gate_w, expert_dists=expert_d, mixture_dist=mixture)


def predict(params: MoVParams, views) -> tuple[int, np.ndarray]:
    """Hard label (argmax of the mixture; ties go to the lowest class index)."""
    pred = forward(params, views)
    return int(np.argmax(pred.mixture_dist)), pred.mixture_dist


def predict_batch(params: MoVParams, views: list[np.ndarray]) -> np.ndarray:
    """Mixture class distributions for a batch, (n, k)."""
    caches = forward_batch(params, views)
    g = np.exp(caches.log_gate)
    e = np.exp(caches.log_expert)
    return np.einsum("nm,nmk->nk", g, e)


def gate_weights_batch(params: MoVParams, views: list[np.ndarray]) -> np.ndarray:
    return np.exp(forward_batch(params, views).log_gate)


def posterior_weights(prediction: MoVPrediction, label: int) -> PosteriorWeights:
    """Per-view responsibility for the true label: gate weight times expert
    likelihood, normalized by the mixture likelihood of that label."""
    joint = prediction.gate_weights * prediction.expert_dists[:, label]
    denom = joint.sum()
    if denom == 0.0:
        raise NumericError("degenerate posterior: mixture probability of the label is 0")
    return PosteriorWeights(w=joint / denom)


def _sample_ll(caches: MoVCaches, labels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-sample mixture log-likelihood and posterior weights, in log space."""
    n = labels.shape[0]
    log_joint = caches.log_gate + caches.log_expert[np.arange(n), :, labels]  # (n, m)
    hi = log_joint.max(axis=1, keepdims=True)
    ll = hi[:, 0] + np.log(np.exp(log_joint - hi).sum(axis=1))
    w = np.exp(log_joint - ll[:, None])
    return ll, w


def log_likelihood(params: MoVParams, batch) -> float:
    """Mean per-sample mixture log-likelihood (no dropout)."""
    views, labels = batch
    if len(labels) == 0:
        raise ConfigError("empty dataset")
    caches = forward_batch(params, views)
    ll, _ = _sample_ll(caches, labels)
    return float(ll.mean())


def composite_loss(
    params: MoVParams,
    batch,
    lam: float,
    dropout_rate: float = 0.0,
    gate_dropout: bool = True,
    masks: dict | None = None,
) -> float:
    """Mixture log-likelihood plus lam times the standalone per-view
    log-likelihoods, as per-sample means. This is the training objective
    (maximized); lam=0 reduces it to log_likelihood exactly.
    """
    views, labels = batch
    if len(labels) == 0:
        raise ConfigError("empty dataset")
    mode = "train" if (masks is not None and dropout_rate > 0.0) else "infer"
    caches = forward_batch(params, views, mode, dropout_rate, gate_dropout, masks=masks)
    ll, _ = _sample_ll(caches, labels)
    total = ll.mean()
    if lam != 0.0:
        n = labels.shape[0]
        per_view = caches.log_expert[np.arange(n), :, labels]  # (n, m)
        total += lam * per_view.mean(axis=0).sum()
    return float(total)


def backward(
    params: MoVParams,
    batch,
    lam: float,
    dropout_rate: float = 0.0,
    gate_dropout: bool = True,
    rng: np.random.Generator | None = None,
    masks: dict | None = None,
) -> tuple[float, MoVParams]:
    """Objective value and its analytic gradients (ascent direction).

    Expert i receives the posterior-weighted log-likelihood gradient plus the
    lam-scaled standalone gradient; at the logit level that is
    (w_i + lam) * (onehot(y) - p_i) / n. The gate's logit-level gradient is
    (w - gate_weights) / n, and the lam term never touches the gate. With
    dropout active the same masks serve the loss and its gradient.
    """
    views, labels = batch
    n = len(labels)
    if n == 0:
        raise ConfigError("empty batch")
    train = dropout_rate > 0.0 and (rng is not None or masks is not None)
    mode = "train" if train else "infer"
    caches = forward_batch(
        params, views, mode, dropout_rate, gate_dropout, rng=rng, masks=masks
    )
    ll, w = _sample_ll(caches, labels)
    if not np.isfinite(ll).all():
        bad = int(np.flatnonzero(~np.isfinite(ll))[0])
        raise NumericError(f"non-finite log-likelihood at sample {bad}")
    loss = ll.mean()

    gate_probs = np.exp(caches.log_gate)
    gate_logit_grad = (w - gate_probs) / n
    gate_grads = mlp_backward(params.gate, caches.gate, gate_logit_grad)

    rows = np.arange(n)
    expert_grads = []
    for i, expert in enumerate(params.experts):
        p = np.exp(caches.log_expert[:, i, :])        # (n, k)
        resid = -p
        resid[rows, labels] += 1.0                    # onehot(y) - p
        scale = (w[:, i] + lam)[:, None] / n
        expert_grads.append(mlp_backward(expert, caches.experts[i], scale * resid))

    if lam != 0.0:
        loss += lam * caches.log_expert[rows, :, labels].mean(axis=0).sum()
    return float(loss), MoVParams(gate=gate_grads, experts=tuple(expert_grads))


# ---------------------------------------------------------------------------
# Flatten/unflatten and the finite-difference oracle over the whole model
# ---------------------------------------------------------------------------

def flatten_mov(params: MoVParams) -> np.ndarray:
    parts = [nn.flatten_params(params.gate)]
    parts += [nn.flatten_params(e) for e in params.experts]
    return np.concatenate(parts)


def unflatten_mov(template: MoVParams, vec: np.ndarray) -> MoVParams:
    pos = nn.flatten_params(template.gate).size
    gate = nn.unflatten_params(template.gate, vec[:pos])
    experts = []
    for e in template.experts:
        size = nn.flatten_params(e).size
        experts.append(nn.unflatten_params(e, vec[pos : pos + size]))
        pos += size
    return MoVParams(gate=gate, experts=tuple(experts))


def finite_diff_mov(loss_fn, params: MoVParams, step: float) -> MoVParams:
    vec = flatten_mov(params)
    grad = nn.finite_diff_vector(lambda v: loss_fn(unflatten_mov(params, v)), vec, step)
    return unflatten_mov(params, grad)


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------

@dataclass
class _MoVAdam:
    gate: AdamState
    experts: list[AdamState]
    gate_lr_ratio: float = 1.0

    def set_lr(self, lr: float) -> None:
        self.gate.learning_rate = lr * self.gate_lr_ratio
        for s in self.experts:
            s.learning_rate = lr


def _init_optimizer(params: MoVParams, config: TrainConfig) -> _MoVAdam:
    mk = lambda p, lr: nn.init_adam(p, lr, config.beta1, config.beta2, config.epsilon)
    gate_lr = config.gate_learning_rate or config.learning_rate
    return _MoVAdam(
        gate=mk(params.gate, gate_lr),
        experts=[mk(e, config.learning_rate) for e in params.experts],
        gate_lr_ratio=gate_lr / config.learning_rate,
    )


def _negate(grads: MLPParams) -> MLPParams:
    return MLPParams(
        layers=tuple(
            nn.LayerParams(-l.weights, -l.biases) for l in grads.layers
        )
    )


def train(
    params: MoVParams,
    train_set,
    val_set,
    config: TrainConfig,
) -> tuple[MoVParams, TrainHistory]:
    """Adam on the negated composite objective with learning-rate reduction on
    validation plateau and early stopping.

    ``train_set`` and ``val_set`` are (views, labels) batches. The validation
    criterion is the mixture negative log-likelihood (the lam term is
    excluded so it cannot distort model selection). Returns the parameter
    snapshot from the best validation epoch. Deterministic given config.seed.
    """
    train_views, train_labels = train_set
    val_views, val_labels = val_set
    if len(val_labels) == 0:
        raise ConfigError("empty validation set")
    n = len(train_labels)
    rng = np.random.default_rng(config.seed)
    opt = _init_optimizer(params, config)
    lr = config.learning_rate
    history = TrainHistory()
    best_params = params
    best_val = np.inf
    since_improve = 0
    since_plateau = 0

    for epoch in range(config.max_epochs):
        if config.batch_size is None or config.batch_size >= n:
            order = [np.arange(n)]
        else:
            perm = rng.permutation(n)
            order = [
                perm[i : i + config.batch_size]
                for i in range(0, n, config.batch_size)
            ]
        epoch_loss = 0.0
        for idx in order:
            batch = ([v[idx] for v in train_views], train_labels[idx])
            try:
                obj, grads = backward(
                    params, batch, config.lam, config.dropout_rate,
                    config.gate_dropout, rng=rng,
                )
            except NumericError as exc:
                raise NumericError(f"epoch {epoch}: {exc}") from exc
            epoch_loss += -obj * len(idx)
            new_experts = []
            for i, e in enumerate(params.experts):
                p, opt.experts[i] = nn.adam_step(e, _negate(grads.experts[i]), opt.experts[i])
                new_experts.append(p)
            if config.freeze_gate:
                gate = params.gate
            else:
                gate, opt.gate = nn.adam_step(params.gate, _negate(grads.gate), opt.gate)
            params = MoVParams(gate=gate, experts=tuple(new_experts))

        val_nll = -log_likelihood(params, val_set)
        history.train_loss.append(epoch_loss / n)
        history.val_loss.append(val_nll)
        history.learning_rate.append(lr)

        if val_nll < best_val - 1e-12:
            best_val = val_nll
            best_params = params
            history.best_epoch = epoch
            since_improve = 0
            since_plateau = 0
        else:
            since_improve += 1
            since_plateau += 1
        if since_improve >= config.early_stop_patience:
            break
        if since_plateau >= config.plateau_patience:
            lr *= config.plateau_factor
            opt.set_lr(lr)
            since_plateau = 0

    return best_params, history


# ---------------------------------------------------------------------------
# Checkpoint format: magic "MOV1", uint32 little-endian JSON header length,
# JSON header, then every parameter array as little-endian float64 in header
# order (gate layers first, then each expert; weights row-major, then biases).
# ---------------------------------------------------------------------------

class CheckpointError(ValueError):
    pass


def _layer_sizes(p: MLPParams) -> list[int]:
    return list(p.layer_sizes)


def save_checkpoint(path, params: MoVParams, meta: dict | None = None) -> None:
    header = {
        "m": params.m,
        "k": params.k,
        "gate_sizes": _layer_sizes(params.gate),
        "expert_sizes": [_layer_sizes(e) for e in params.experts],
    }
    if meta:
        header.update(meta)
    blob = json.dumps(header, sort_keys=True).encode()
    with Path(path).open("wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for net in (params.gate, *params.experts):
            for layer in net.layers:
                fh.write(layer.weights.astype("<f8").tobytes())
                fh.write(layer.biases.astype("<f8").tobytes())


def load_checkpoint(path) -> tuple[MoVParams, dict]:
    with Path(path).open("rb") as fh:
        magic = fh.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise CheckpointError(f"bad magic {magic!r}, expected {CHECKPOINT_MAGIC!r}")
        (hlen,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(hlen))
        def read_net(sizes):
            layers = []
            for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
                w = np.frombuffer(fh.read(8 * fan_out * fan_in), dtype="<f8")
                w = w.reshape(fan_out, fan_in).astype(np.float64)
                b = np.frombuffer(fh.read(8 * fan_out), dtype="<f8").astype(np.float64)
                layers.append(nn.LayerParams(w, b))
            return MLPParams(layers=tuple(layers))
        gate = read_net(header["gate_sizes"])
        experts = tuple(read_net(s) for s in header["expert_sizes"])
        trailing = fh.read(1)
        if trailing:
            raise CheckpointError("trailing bytes after parameters")
    return MoVParams(gate=gate, experts=experts), header
