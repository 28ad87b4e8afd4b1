"""Encoder building blocks, classification loss, Adam, and the cosine schedule.

Encoders are plain MLPs (relu hidden layers, linear output) over flattened
frame sequences. The optimizer is bias-corrected Adam with decoupled weight
decay; weight decay touches weight matrices only, never biases. The learning
rate follows a half-cosine ramp from `lr_base` down to `lr_min`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import DomainError, ShapeError, Tensor, constant, matmul, parameter


class ConfigError(ValueError):
    """Invalid hyperparameter or dimension configuration."""


class NonFiniteGradError(RuntimeError):
    """A gradient contained NaN/Inf; training must abort with diagnostics."""


@dataclass
class TrainHyper:
    """Training-loop hyperparameters; defaults are desk-scale."""

    epochs: int = 60
    batch_size: int = 16
    lr_base: float = 1e-3
    lr_min: float = 0.0
    weight_decay: float = 1e-4
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.lr_min > self.lr_base:
            raise ConfigError(
                f"lr_min ({self.lr_min}) must not exceed lr_base ({self.lr_base})"
            )


def paper_hyper(seed: int = 0) -> TrainHyper:
    """The published fine-tuning recipe (tuned for a pretrained backbone)."""
    return TrainHyper(epochs=200, batch_size=16, lr_base=3e-5, lr_min=0.0,
                      weight_decay=1e-4, seed=seed)


class MlpParams:
    """Weights of an MLP: relu on hidden layers, linear final layer."""

    def __init__(self, layers: list[tuple[Tensor, Tensor]],
                 input_dim: int, hidden_dims: tuple[int, ...], output_dim: int):
        self.layers = layers
        self.input_dim = input_dim
        self.hidden_dims = tuple(hidden_dims)
        self.output_dim = output_dim

    @property
    def dims(self) -> tuple[int, ...]:
        return (self.input_dim, *self.hidden_dims, self.output_dim)

    def parameters(self) -> list[Tensor]:
        out = []
        for w, b in self.layers:
            out.append(w)
            out.append(b)
        return out

    def weight_tensors(self) -> set[int]:
        """Ids of weight matrices (the decayed subset)."""
        return {id(w) for w, _ in self.layers}


def init_mlp(rng: np.random.Generator, input_dim: int,
             hidden_dims: tuple[int, ...], output_dim: int) -> MlpParams:
    """Seeded uniform fan-in init: W ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)), b = 0."""
    dims = (input_dim, *hidden_dims, output_dim)
    if len(dims) < 2 or any(d < 1 for d in dims):
        raise ConfigError(f"invalid MLP dims {dims}")
    layers = []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        bound = 1.0 / math.sqrt(fan_in)
        w = parameter(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        b = parameter(np.zeros(fan_out))
        layers.append((w, b))
    return MlpParams(layers, input_dim, tuple(hidden_dims), output_dim)


def mlp_forward(params: MlpParams, x: Tensor) -> Tensor:
    """Run the MLP on a batch (rows are examples). Final layer is linear."""
    if x.values.ndim != 2 or x.shape[1] != params.input_dim:
        raise ShapeError(
            f"mlp_forward: input shape {x.shape} incompatible with input_dim "
            f"{params.input_dim} (expects a (batch, {params.input_dim}) tensor)"
        )
    h = x
    last = len(params.layers) - 1
    for i, (w, b) in enumerate(params.layers):
        h = matmul(h, w) + b
        if i != last:
            h = h.relu()
    return h


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return matmul(x, w) + b


def _log_sum_exp_rows(logits: Tensor) -> Tensor:
    """Row-wise log(sum(exp(logits))) with max-shift stabilization, shape (B,)."""
    shift = constant(np.max(logits.values, axis=1, keepdims=True)
                     * np.ones_like(logits.values))
    summed = (logits - shift).exp().sum(axis=1)
    return summed.log() + constant(np.max(logits.values, axis=1))


def cross_entropy_rows(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean of -log softmax(logits_b)[labels_b] over the batch, scalar tensor."""
    labels = np.asarray(labels, dtype=np.int64)
    n, c = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"labels shape {labels.shape} vs logits {logits.shape}")
    if np.any(labels < 0) or np.any(labels >= c):
        bad = labels[(labels < 0) | (labels >= c)][0]
        raise ConfigError(f"label {bad} out of range for {c} classes")
    one_hot = np.zeros((n, c))
    one_hot[np.arange(n), labels] = 1.0
    picked = (logits * constant(one_hot)).sum(axis=1)
    return (_log_sum_exp_rows(logits) - picked).mean()


def cross_entropy(logits: Tensor, label: int) -> Tensor:
    """-log softmax(logits)[label] for a single logit vector."""
    v = logits.values
    if v.ndim == 1:
        flat = Tensor(v.reshape(1, -1), requires_grad=logits.requires_grad,
                      op="reshape", parents=(logits,),
                      backward_fn=lambda up: (up.reshape(v.shape),))
    elif v.ndim == 2 and v.shape[0] == 1:
        flat = logits
    else:
        raise ShapeError(f"cross_entropy expects a single logit vector, got {v.shape}")
    return cross_entropy_rows(flat, np.array([label]))


def softmax(logits: np.ndarray) -> np.ndarray:
    """Plain-array softmax over the last axis (no graph)."""
    shifted = logits - np.max(logits, axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def cosine_lr(step: int, total_steps: int, lr_base: float, lr_min: float) -> float:
    """Half-cosine decay: lr_base at step 0 down to lr_min at total_steps."""
    if total_steps < 1:
        raise ConfigError("total_steps must be >= 1")
    if not 0 <= step <= total_steps:
        raise ConfigError(f"step {step} outside [0, {total_steps}]")
    return lr_min + 0.5 * (lr_base - lr_min) * (1.0 + math.cos(math.pi * step / total_steps))


@dataclass
class AdamState:
    """Per-parameter Adam moments plus the shared hyperparameters.

    `decay_ids` marks which parameters receive decoupled weight decay
    (weight matrices; biases and Gaussian-head offsets are exempt).
    """

    params: list[Tensor]
    lr_base: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    decay_ids: set[int] = field(default_factory=set)
    step_count: int = 0

    def __post_init__(self):
        self.m = [np.zeros_like(p.values) for p in self.params]
        self.v = [np.zeros_like(p.values) for p in self.params]


def adam_step(state: AdamState, params: list[Tensor],
              grads: list[np.ndarray], lr_now: float) -> None:
    """One bias-corrected Adam update, in place.

    Decoupled weight decay shrinks decayed parameters by lr_now * wd before
    the Adam delta is applied.
    """
    if len(params) != len(state.params):
        raise ConfigError("params do not match optimizer state")
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            g = np.zeros_like(p.values)
        if g.shape != p.values.shape:
            raise ShapeError(f"grad shape {g.shape} vs param shape {p.values.shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradError(
                f"non-finite gradient at parameter {i} (shape {p.values.shape})"
            )
        if state.weight_decay != 0.0 and id(p) in state.decay_ids:
            p.values *= 1.0 - lr_now * state.weight_decay
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * (g * g)
        m_hat = state.m[i] / bc1
        v_hat = state.v[i] / bc2
        p.values -= lr_now * m_hat / (np.sqrt(v_hat) + state.eps)
