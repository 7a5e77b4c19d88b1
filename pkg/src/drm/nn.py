"""Minimal dense-network core.

Tanh MLPs with an analytically derived backward pass, softmax cross-entropy,
SGD/Adam with decoupled weight decay, and a central-finite-difference gradient
oracle. Everything is float64 and deterministic given a seeded generator.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


def glorot_uniform(fan_in: int, fan_out: int, rng: np.random.Generator) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


class Mlp:
    """Fully connected network: tanh on hidden layers, linear output.

    Parameters are a list of (weight, bias) pairs. Weights have shape
    (fan_in, fan_out); inputs are row vectors or (batch, dim) matrices.
    """

    def __init__(self, layer_dims, rng: np.random.Generator | None = None):
        if len(layer_dims) < 2:
            raise ValueError("need at least an input and an output layer")
        if any(int(d) <= 0 for d in layer_dims):
            raise ValueError(f"layer dims must be positive, got {layer_dims}")
        self.layer_dims = [int(d) for d in layer_dims]
        self.weights = []
        self.biases = []
        for fan_in, fan_out in zip(self.layer_dims[:-1], self.layer_dims[1:]):
            if rng is None:
                w = np.zeros((fan_in, fan_out))
            else:
                w = glorot_uniform(fan_in, fan_out, rng)
            self.weights.append(w)
            self.biases.append(np.zeros(fan_out))

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    def parameters(self):
        """Flat list [W0, b0, W1, b1, ...] of references, not copies."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.append(w)
            out.append(b)
        return out

    def copy(self) -> "Mlp":
        dup = Mlp(self.layer_dims)
        dup.weights = [w.copy() for w in self.weights]
        dup.biases = [b.copy() for b in self.biases]
        return dup

    def check_finite(self):
        for p in self.parameters():
            if not np.all(np.isfinite(p)):
                raise FloatingPointError("non-finite parameter after update")

    def forward(self, x: np.ndarray) -> np.ndarray:
        """Logits for a single input vector or a (batch, dim) matrix."""
        logits, _ = self.forward_cached(x)
        return logits

    def forward_cached(self, x: np.ndarray):
        """Forward pass keeping per-layer activations for the backward pass."""
        x = np.asarray(x, dtype=np.float64)
        squeeze = x.ndim == 1
        a = x[None, :] if squeeze else x
        if a.shape[1] != self.layer_dims[0]:
            raise ValueError(
                f"input dim {a.shape[1]} != expected {self.layer_dims[0]}"
            )
        activations = [a]
        for i in range(self.n_layers):
            h = a @ self.weights[i] + self.biases[i]
            a = np.tanh(h) if i < self.n_layers - 1 else h
            activations.append(a)
        out = activations[-1][0] if squeeze else activations[-1]
        return out, (activations, squeeze)

    def backward_cached(self, cache, grad_out: np.ndarray):
        """Backprop an upstream logits gradient through the cached forward.

        Returns (grads, grad_input) where grads is a flat list matching
        parameters() and grad_input allows chaining into an upstream network.
        """
        activations, squeeze = cache
        g = np.asarray(grad_out, dtype=np.float64)
        if squeeze:
            g = g[None, :]
        grads_w = [None] * self.n_layers
        grads_b = [None] * self.n_layers
        for i in range(self.n_layers - 1, -1, -1):
            a_prev = activations[i]
            grads_w[i] = a_prev.T @ g
            grads_b[i] = g.sum(axis=0)
            g = g @ self.weights[i].T
            if i > 0:
                # activations[i] already holds tanh(h); d tanh = 1 - tanh^2
                g = g * (1.0 - activations[i] ** 2)
        grads = []
        for gw, gb in zip(grads_w, grads_b):
            grads.append(gw)
            grads.append(gb)
        grad_input = g[0] if squeeze else g
        return grads, grad_input


def mlp_forward(model: Mlp, x: np.ndarray) -> np.ndarray:
    return model.forward(x)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - np.max(logits, axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy_with_grad(logits: np.ndarray, target):
    """Softmax cross-entropy loss and its gradient w.r.t. the logits.

    For a single logits vector, target is a class index and the gradient is
    softmax(logits) - onehot(target). For a (batch, classes) matrix, target is
    an index vector, the loss is the batch mean, and the gradient carries the
    1/batch factor so downstream backprop yields mean-loss gradients.
    """
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim == 1:
        t = int(target)
        if not 0 <= t < logits.shape[0]:
            raise IndexError(f"target {t} out of range for {logits.shape[0]} classes")
        p = softmax(logits)
        loss = -np.log(p[t])
        grad = p.copy()
        grad[t] -= 1.0
        return loss, grad
    targets = np.asarray(target)
    if targets.shape[0] != logits.shape[0]:
        raise ValueError("batch size mismatch between logits and targets")
    if targets.min() < 0 or targets.max() >= logits.shape[1]:
        raise IndexError("target out of range")
    p = softmax(logits)
    n = logits.shape[0]
    rows = np.arange(n)
    loss = -np.log(p[rows, targets]).mean()
    grad = p
    grad[rows, targets] -= 1.0
    grad /= n
    return loss, grad


def loss_on(model: Mlp, x: np.ndarray, target) -> float:
    logits = model.forward(x)
    loss, _ = cross_entropy_with_grad(logits, target)
    return float(loss)


def backward(model: Mlp, x: np.ndarray, target):
    """Gradients of the (mean) cross-entropy loss w.r.t. every parameter."""
    logits, cache = model.forward_cached(x)
    loss, dlogits = cross_entropy_with_grad(logits, target)
    grads, _ = model.backward_cached(cache, dlogits)
    return loss, grads


def grad_check(model: Mlp, x: np.ndarray, target, eps: float = 1e-3) -> float:
    """Max relative error between analytic gradients and central differences.

    The numeric derivative Richardson-extrapolates central differences at
    eps and eps/2, cancelling the quadratic truncation term; a plain
    second-order difference at any single step cannot separate roundoff from
    truncation on near-zero gradient entries at the 1e-4 level.
    """
    if not 0.0 < eps <= 1e-2:
        raise ValueError(f"eps must be in (0, 1e-2], got {eps}")
    _, grads = backward(model, x, target)

    def central(flat, j, step):
        orig = flat[j]
        flat[j] = orig + step
        up = loss_on(model, x, target)
        flat[j] = orig - step
        down = loss_on(model, x, target)
        flat[j] = orig
        return (up - down) / (2.0 * step)

    worst = 0.0
    for param, grad in zip(model.parameters(), grads):
        flat_p = param.reshape(-1)
        flat_g = grad.reshape(-1)
        for j in range(flat_p.size):
            coarse = central(flat_p, j, eps)
            fine = central(flat_p, j, eps / 2.0)
            numeric = (4.0 * fine - coarse) / 3.0
            denom = max(abs(flat_g[j]), abs(numeric), 1e-8)
            worst = max(worst, abs(flat_g[j] - numeric) / denom)
    return worst


@dataclass
class OptimState:
    """SGD or Adam state with decoupled weight decay."""

    kind: str = "sgd"
    learning_rate: float = 1e-3
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    def __post_init__(self):
        if self.kind not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer kind {self.kind!r}")

    @classmethod
    def for_model(cls, model: Mlp, kind: str = "sgd", learning_rate: float = 1e-3,
                  weight_decay: float = 0.0, **kwargs) -> "OptimState":
        state = cls(kind=kind, learning_rate=learning_rate,
                    weight_decay=weight_decay, **kwargs)
        if kind == "adam":
            state.m = [np.zeros_like(p) for p in model.parameters()]
            state.v = [np.zeros_like(p) for p in model.parameters()]
        return state


def optimizer_step(model: Mlp, grads, state: OptimState):
    """Update model parameters in place; returns (model, state)."""
    params = model.parameters()
    if len(grads) != len(params):
        raise ValueError("gradient list does not match parameter list")
    for p, g in zip(params, grads):
        if p.shape != g.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        if not np.all(np.isfinite(g)):
            raise FloatingPointError("non-finite gradient; update rejected")
    state.step_count += 1
    lr = state.learning_rate
    wd = state.weight_decay
    if state.kind == "sgd":
        for p, g in zip(params, grads):
            if wd:
                p -= lr * wd * p
            p -= lr * g
    else:
        b1, b2 = state.beta1, state.beta2
        bc1 = 1.0 - b1 ** state.step_count
        bc2 = 1.0 - b2 ** state.step_count
        for p, g, m, v in zip(params, grads, state.m, state.v):
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            if wd:
                p -= lr * wd * p
            p -= lr * (m / bc1) / (np.sqrt(v / bc2) + state.epsilon)
    model.check_finite()
    return model, state
