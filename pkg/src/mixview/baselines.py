"""Comparison models: single-view classifiers, fixed-average decision fusion
(Avg), and feature-concatenation fusion (Concat).

Every model exposes the same train/predict contract as the gated mixture, so
the cross-validation harness treats them uniformly. Single-view and Concat
are built as one-expert mixtures (the gate over a single view is inert);
Avg is the mixture with a zeroed, frozen gate, which makes its per-sample
prediction exactly the unweighted mean of expert distributions.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import mov, nn
from .mov import MoVParams, TrainConfig, TrainHistory
from .nn import ConfigError


def _slice_views(kind: str, view_index: int | None, views: list[np.ndarray]) -> list[np.ndarray]:
    if kind == "single":
        return [views[view_index]]
    if kind == "concat":
        return [np.concatenate(views, axis=-1)]
    return list(views)


@dataclass
class FusionModel:
    """A trainable model with a uniform contract across all fusion kinds.

    kind: "mov", "avg", "concat", or "single"; view_index set for "single".
    """

    kind: str
    params: MoVParams
    view_index: int | None = None

    def adapt(self, views: list[np.ndarray]) -> list[np.ndarray]:
        return _slice_views(self.kind, self.view_index, views)

    def adapt_batch(self, batch):
        views, labels = batch
        return self.adapt(views), labels

    def train_config(self, config: TrainConfig) -> TrainConfig:
        if self.kind == "avg":
            return replace(config, freeze_gate=True)
        return config

    def fit(self, train_set, val_set, config: TrainConfig) -> TrainHistory:
        trained, history = mov.train(
            self.params,
            self.adapt_batch(train_set),
            self.adapt_batch(val_set),
            self.train_config(config),
        )
        self.params = trained
        return history

    def predict_proba(self, views: list[np.ndarray]) -> np.ndarray:
        return mov.predict_batch(self.params, self.adapt(views))

    def gate_weights(self, views: list[np.ndarray]) -> np.ndarray:
        return mov.gate_weights_batch(self.params, self.adapt(views))


def single_view_model(
    view_dims,
    n_classes: int,
    view_index: int,
    hidden=(24, 24),
    seed: int = 0,
) -> FusionModel:
    """An MLP classifier on one view only; other views never reach it."""
    view_dims = tuple(view_dims)
    if not 0 <= view_index < len(view_dims):
        raise ConfigError(f"view index {view_index} out of range for {len(view_dims)} views")
    params = mov.init_mov(
        [view_dims[view_index]], n_classes, expert_hidden=hidden, gate_hidden=(), seed=seed
    )
    return FusionModel(kind="single", params=params, view_index=view_index)


def avg_fusion_model(
    view_dims,
    n_classes: int,
    hidden=(24, 24),
    seed: int = 0,
) -> FusionModel:
    """The mixture with its gate replaced by constant uniform weights: gate
    parameters are zeroed and frozen, experts train jointly on the uniform
    mixture likelihood."""
    view_dims = tuple(view_dims)
    if len(view_dims) < 2:
        raise ConfigError("avg fusion needs at least two views")
    params = mov.init_mov(view_dims, n_classes, expert_hidden=hidden, seed=seed)
    zero_gate = nn.MLPParams(
        layers=tuple(
            nn.LayerParams(np.zeros_like(l.weights), np.zeros_like(l.biases))
            for l in params.gate.layers
        )
    )
    return FusionModel(kind="avg", params=MoVParams(gate=zero_gate, experts=params.experts))


def concat_fusion_model(
    view_dims,
    n_classes: int,
    hidden=(24, 24),
    seed: int = 0,
) -> FusionModel:
    """A single MLP on the concatenated feature vector."""
    total = int(sum(view_dims))
    params = mov.init_mov([total], n_classes, expert_hidden=hidden, gate_hidden=(), seed=seed)
    return FusionModel(kind="concat", params=params)


def mov_model(
    view_dims,
    n_classes: int,
    expert_hidden=(24, 24),
    gate_hidden=(3, 3),
    seed: int = 0,
) -> FusionModel:
    params = mov.init_mov(view_dims, n_classes, expert_hidden, gate_hidden, seed=seed)
    return FusionModel(kind="mov", params=params)


def train_experts_independently(
    model: FusionModel, train_set, val_set, config: TrainConfig
) -> list[TrainHistory]:
    """Variant of Avg training: each expert is fit separately on its own view
    likelihood, then recombined under the uniform gate."""
    if model.kind != "avg":
        raise ConfigError("independent training is an avg-fusion variant")
    histories = []
    experts = []
    for i, expert in enumerate(model.params.experts):
        gate = nn.init_mlp([expert.input_size, 1], config.seed)
        single = FusionModel(
            kind="single",
            params=MoVParams(gate=gate, experts=(expert,)),
            view_index=i,
        )
        histories.append(single.fit(train_set, val_set, config))
        experts.append(single.params.experts[0])
    model.params = MoVParams(gate=model.params.gate, experts=tuple(experts))
    return histories
