"""Feed-forward network machinery: MLP forward/backward, Adam, gradient checks.

Backward passes are exact reverse-mode gradients written against the cached
forward intermediates. Inputs may be single vectors or (batch, dim) stacks;
batched parameter gradients are summed over the batch (callers average).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ShapeError, StateError

Activation = Callable[[np.ndarray], np.ndarray]

_ACTIVATIONS = {
    "relu": (lambda z: np.maximum(z, 0.0), lambda z: (z > 0.0).astype(np.float64)),
    "tanh": (np.tanh, lambda z: 1.0 - np.tanh(z) ** 2),
}


def seeded_rng(seed: int, stream: int = 0) -> np.random.Generator:
    """Deterministic PCG64 generator, splittable by stream index.

    Streams are derived via ``SeedSequence(seed, spawn_key=(stream,))`` so the
    same (seed, stream) pair always yields the same draws on any platform.
    """
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(stream,)))


def glorot_uniform(rng: np.random.Generator, fan_out: int, fan_in: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_out, fan_in))


@dataclass
class Mlp:
    """Affine chain with an elementwise activation on all but the last layer.

    ``weights[i]`` has shape (dims[i+1], dims[i]); biases start at zero.
    """

    layer_dims: tuple[int, ...]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    activation: str = "relu"

    @classmethod
    def init(cls, layer_dims: Sequence[int], activation: str, rng: np.random.Generator) -> "Mlp":
        if len(layer_dims) < 2:
            raise ValueError(f"need at least input and output dims, got {layer_dims}")
        if activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}, expected one of {sorted(_ACTIVATIONS)}")
        weights = [
            glorot_uniform(rng, layer_dims[i + 1], layer_dims[i]) for i in range(len(layer_dims) - 1)
        ]
        biases = [np.zeros(layer_dims[i + 1]) for i in range(len(layer_dims) - 1)]
        return cls(tuple(int(d) for d in layer_dims), weights, biases, activation)

    @property
    def n_layers(self) -> int:
        return len(self.weights)


@dataclass
class GradientTape:
    """Per-layer inputs and pre-activations cached by one forward pass."""

    inputs: list[np.ndarray] = field(default_factory=list)
    preacts: list[np.ndarray] = field(default_factory=list)
    single: bool = False


def mlp_forward(net: Mlp, x: np.ndarray) -> tuple[np.ndarray, GradientTape]:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != net.layer_dims[0]:
        raise ShapeError(f"input shape {x.shape} does not match expected dim {net.layer_dims[0]}")
    act, _ = _ACTIVATIONS[net.activation]
    tape = GradientTape(single=single)
    h = x
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        tape.inputs.append(h)
        z = h @ w.T + b
        tape.preacts.append(z)
        h = act(z) if i < net.n_layers - 1 else z
    return (h[0] if single else h), tape


def mlp_backward(net: Mlp, tape: GradientTape, dy: np.ndarray) -> tuple[np.ndarray, list[np.ndarray], list[np.ndarray]]:
    """Gradients w.r.t. the input and every weight/bias, from upstream ``dy``.

    Returns (dx, dweights, dbiases); batched parameter grads are summed over
    the batch axis.
    """
    dy = np.asarray(dy, dtype=np.float64)
    if tape.single:
        dy = dy[None, :]
    if len(tape.inputs) != net.n_layers:
        raise StateError(f"tape has {len(tape.inputs)} layers, network has {net.n_layers}")
    if dy.shape != (tape.inputs[0].shape[0], net.layer_dims[-1]):
        raise StateError(
            f"upstream grad shape {dy.shape} does not match tape batch "
            f"{tape.inputs[0].shape[0]} and output dim {net.layer_dims[-1]}"
        )
    _, dact = _ACTIVATIONS[net.activation]
    dweights: list[np.ndarray | None] = [None] * net.n_layers
    dbiases: list[np.ndarray | None] = [None] * net.n_layers
    g = dy
    for i in reversed(range(net.n_layers)):
        gz = g if i == net.n_layers - 1 else g * dact(tape.preacts[i])
        dweights[i] = gz.T @ tape.inputs[i]
        dbiases[i] = gz.sum(axis=0)
        g = gz @ net.weights[i]
    dx = g[0] if tape.single else g
    return dx, dweights, dbiases


@dataclass
class AdamState:
    """Moment buffers and step counter for the Adam update."""

    first_moment: list[np.ndarray]
    second_moment: list[np.ndarray]
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def init(cls, params: Sequence[np.ndarray], lr: float = 1e-3) -> "AdamState":
        return cls(
            first_moment=[np.zeros_like(p) for p in params],
            second_moment=[np.zeros_like(p) for p in params],
            lr=lr,
        )


def adam_step(
    params: list[np.ndarray], grads: Sequence[np.ndarray], state: AdamState
) -> tuple[list[np.ndarray], AdamState]:
    """One bias-corrected Adam update; parameter arrays are updated in place."""
    if len(params) != len(grads) or len(params) != len(state.first_moment):
        raise ShapeError(
            f"param/grad/state length mismatch: {len(params)}/{len(grads)}/{len(state.first_moment)}"
        )
    state.step += 1
    c1 = 1.0 - state.beta1**state.step
    c2 = 1.0 - state.beta2**state.step
    for p, g, m, v in zip(params, grads, state.first_moment, state.second_moment):
        if p.shape != g.shape:
            raise ShapeError(f"gradient shape {g.shape} does not match parameter shape {p.shape}")
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state


def gradient_check(
    net: Mlp,
    x: np.ndarray,
    loss_fn: Callable[[np.ndarray], tuple[float, np.ndarray]],
    h: float = 1e-5,
) -> float:
    """Worst relative error between backprop and central finite differences.

    ``loss_fn`` maps the network output to (loss, dloss/doutput). The relative
    error denominator is floored at 1e-4 so finite-difference noise on
    near-zero gradients does not dominate.
    """
    y, tape = mlp_forward(net, x)
    _, dy = loss_fn(y)
    _, dws, dbs = mlp_backward(net, tape, dy)
    analytic = dws + dbs
    worst = 0.0
    for param, grad in zip(net.weights + net.biases, analytic):
        flat = param.reshape(-1)
        gflat = grad.reshape(-1)
        for idx in range(flat.size):
            orig = flat[idx]
            flat[idx] = orig + h
            lp, _ = loss_fn(mlp_forward(net, x)[0])
            flat[idx] = orig - h
            lm, _ = loss_fn(mlp_forward(net, x)[0])
            flat[idx] = orig
            fd = (lp - lm) / (2.0 * h)
            rel = abs(fd - gflat[idx]) / max(abs(fd), abs(gflat[idx]), 1e-4)
            worst = max(worst, rel)
    return worst
