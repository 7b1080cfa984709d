"""Minimal dense-network substrate: layers, ReLU, inverted dropout, Adam,
and a finite-difference gradient oracle.

Everything runs in float64. Parameters are immutable after construction;
functions return new objects instead of mutating.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np


class ConfigError(ValueError):
    """Invalid layer configuration or hyperparameters."""


class ShapeError(ValueError):
    """Input shape does not match the network."""


class NumericError(ArithmeticError):
    """Non-finite value encountered where finiteness is required."""


@dataclass(frozen=True)
class LayerParams:
    weights: np.ndarray  # (out, in)
    biases: np.ndarray   # (out,)


@dataclass(frozen=True)
class MLPParams:
    layers: tuple[LayerParams, ...]

    @property
    def layer_sizes(self) -> tuple[int, ...]:
        sizes = [self.layers[0].weights.shape[1]]
        sizes += [l.weights.shape[0] for l in self.layers]
        return tuple(sizes)

    @property
    def input_size(self) -> int:
        return self.layers[0].weights.shape[1]

    @property
    def output_size(self) -> int:
        return self.layers[-1].weights.shape[0]


@dataclass
class ForwardCache:
    """Intermediate values from one forward pass, consumed by mlp_backward.

    layer_inputs[i] is the activation entering layer i (batch, fan_in).
    pre_activations[i] is the affine output of layer i before ReLU.
    dropout_masks[i] is the scaled keep-mask applied after hidden layer i's
    ReLU (already divided by the keep probability), or None in infer mode.
    """

    layer_inputs: list[np.ndarray]
    pre_activations: list[np.ndarray]
    dropout_masks: list[np.ndarray | None]


def init_mlp(layer_sizes: Sequence[int], seed: int) -> MLPParams:
    """He-style initialization: N(0, 2/fan_in) weights, zero biases."""
    sizes = list(layer_sizes)
    if len(sizes) < 2 or any(int(s) != s or s < 1 for s in sizes):
        raise ConfigError(f"layer_sizes must be >=2 positive ints, got {layer_sizes!r}")
    rng = np.random.default_rng(seed)
    layers = []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_out, fan_in))
        layers.append(LayerParams(weights=w, biases=np.zeros(fan_out)))
    return MLPParams(layers=tuple(layers))


def mlp_forward(
    params: MLPParams,
    x: np.ndarray,
    mode: str = "infer",
    dropout_rate: float = 0.0,
    rng: np.random.Generator | None = None,
    masks: Sequence[np.ndarray] | None = None,
) -> tuple[np.ndarray, ForwardCache]:
    """Affine -> ReLU -> (train-mode inverted dropout) per hidden layer; the
    output layer is affine only.

    ``x`` may be a single vector or a (batch, features) matrix. In train mode
    with dropout_rate > 0, masks are drawn from ``rng`` unless ``masks``
    supplies precomputed scaled masks (used to make gradient checks exact).
    """
    if mode not in ("train", "infer"):
        raise ConfigError(f"mode must be 'train' or 'infer', got {mode!r}")
    if not 0.0 <= dropout_rate < 1.0:
        raise ConfigError(f"dropout_rate must be in [0,1), got {dropout_rate}")
    x = np.asarray(x, dtype=np.float64)
    squeeze = x.ndim == 1
    if squeeze:
        x = x[None, :]
    if x.shape[1] != params.input_size:
        raise ShapeError(
            f"input has {x.shape[1]} features, network expects {params.input_size}"
        )

    use_dropout = mode == "train" and dropout_rate > 0.0
    keep = 1.0 - dropout_rate
    a = x
    inputs, pres, used_masks = [], [], []
    n_layers = len(params.layers)
    for i, layer in enumerate(params.layers):
        inputs.append(a)
        z = a @ layer.weights.T + layer.biases
        pres.append(z)
        if i < n_layers - 1:
            a = np.maximum(z, 0.0)
            if use_dropout:
                if masks is not None:
                    m = masks[i]
                else:
                    if rng is None:
                        raise ConfigError("train-mode dropout requires rng or masks")
                    m = (rng.random(a.shape) < keep) / keep
                a = a * m
                used_masks.append(m)
            else:
                used_masks.append(None)
        else:
            a = z
    logits = a[0] if squeeze else a
    return logits, ForwardCache(inputs, pres, used_masks)


def softmax(logits: np.ndarray) -> np.ndarray:
    """Stable softmax over the last axis (max-shifted)."""
    logits = np.asarray(logits, dtype=np.float64)
    if logits.size == 0:
        raise ConfigError("softmax of empty vector")
    if np.isnan(logits).any():
        raise NumericError("NaN in softmax input")
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    logits = np.asarray(logits, dtype=np.float64)
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def mlp_backward(
    params: MLPParams, cache: ForwardCache, logit_gradient: np.ndarray
) -> MLPParams:
    """Exact reverse-mode gradients through the affine/ReLU/dropout chain.

    Returns gradients packed in an MLPParams of identical shape. The cached
    dropout masks are reused, so train-mode gradients are deterministic given
    the cache.
    """
    g = np.asarray(logit_gradient, dtype=np.float64)
    if g.ndim == 1:
        g = g[None, :]
    if g.shape[1] != params.output_size:
        raise ShapeError(
            f"logit_gradient has {g.shape[1]} entries, output size is {params.output_size}"
        )
    grads: list[LayerParams] = [None] * len(params.layers)  # type: ignore[list-item]
    delta = g
    for i in range(len(params.layers) - 1, -1, -1):
        layer = params.layers[i]
        grads[i] = LayerParams(
            weights=delta.T @ cache.layer_inputs[i],
            biases=delta.sum(axis=0),
        )
        if i > 0:
            delta = delta @ layer.weights
            mask = cache.dropout_masks[i - 1]
            if mask is not None:
                delta = delta * mask
            delta = delta * (cache.pre_activations[i - 1] > 0.0)
    return MLPParams(layers=tuple(grads))


@dataclass
class AdamState:
    first_moment: list[LayerParams]
    second_moment: list[LayerParams]
    step_count: int = 0
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8


def init_adam(
    params: MLPParams,
    learning_rate: float = 1e-3,
    beta1: float = 0.9,
    beta2: float = 0.999,
    epsilon: float = 1e-8,
) -> AdamState:
    zeros = lambda: [
        LayerParams(np.zeros_like(l.weights), np.zeros_like(l.biases))
        for l in params.layers
    ]
    return AdamState(zeros(), zeros(), 0, learning_rate, beta1, beta2, epsilon)


def adam_step(
    params: MLPParams, gradients: MLPParams, state: AdamState
) -> tuple[MLPParams, AdamState]:
    """One bias-corrected Adam update, minimizing along ``gradients``.

    The training objective is a likelihood to maximize; callers minimize its
    negation, and that sign convention is fixed here: pass gradients of the
    quantity being minimized.
    """
    t = state.step_count + 1
    b1, b2 = state.beta1, state.beta2
    new_layers, new_m, new_v = [], [], []
    for i, (layer, grad) in enumerate(zip(params.layers, gradients.layers)):
        for name, arr in (("weights", grad.weights), ("biases", grad.biases)):
            if not np.isfinite(arr).all():
                raise NumericError(f"non-finite gradient at layer {i} {name}")
        m = state.first_moment[i]
        v = state.second_moment[i]
        mw = b1 * m.weights + (1 - b1) * grad.weights
        mb = b1 * m.biases + (1 - b1) * grad.biases
        vw = b2 * v.weights + (1 - b2) * grad.weights**2
        vb = b2 * v.biases + (1 - b2) * grad.biases**2
        corr1 = 1 - b1**t
        corr2 = 1 - b2**t
        lr = state.learning_rate
        w = layer.weights - lr * (mw / corr1) / (np.sqrt(vw / corr2) + state.epsilon)
        b = layer.biases - lr * (mb / corr1) / (np.sqrt(vb / corr2) + state.epsilon)
        new_layers.append(LayerParams(w, b))
        new_m.append(LayerParams(mw, mb))
        new_v.append(LayerParams(vw, vb))
    new_state = replace(
        AdamState(new_m, new_v, t, state.learning_rate, b1, b2, state.epsilon)
    )
    return MLPParams(layers=tuple(new_layers)), new_state


def flatten_params(params: MLPParams) -> np.ndarray:
    parts = []
    for l in params.layers:
        parts.append(l.weights.ravel())
        parts.append(l.biases.ravel())
    return np.concatenate(parts)


def unflatten_params(template: MLPParams, vec: np.ndarray) -> MLPParams:
    layers = []
    pos = 0
    for l in template.layers:
        nw = l.weights.size
        w = vec[pos : pos + nw].reshape(l.weights.shape)
        pos += nw
        nb = l.biases.size
        b = vec[pos : pos + nb].copy()
        pos += nb
        layers.append(LayerParams(w, b))
    return MLPParams(layers=tuple(layers))


def finite_diff_vector(f: Callable[[np.ndarray], float], vec: np.ndarray, step: float) -> np.ndarray:
    """Central differences of f at vec, one coordinate at a time."""
    if step <= 0:
        raise ConfigError("finite-difference step must be positive")
    grad = np.zeros_like(vec)
    for j in range(vec.size):
        up = vec.copy()
        up[j] += step
        dn = vec.copy()
        dn[j] -= step
        grad[j] = (f(up) - f(dn)) / (2.0 * step)
    return grad


def finite_diff_gradient(
    loss_fn: Callable[[MLPParams], float], params: MLPParams, step: float
) -> MLPParams:
    """Finite-difference gradient of a scalar loss over MLPParams."""
    vec = flatten_params(params)
    grad_vec = finite_diff_vector(lambda v: loss_fn(unflatten_params(params, v)), vec, step)
    return unflatten_params(params, grad_vec)
