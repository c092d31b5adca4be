"""Dense feedforward networks with hand-written reverse-mode gradients."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

CHECKPOINT_VERSION = 1

_ACTIVATIONS = ("linear", "tanh", "logistic")


def _act(name: str, z: np.ndarray) -> np.ndarray:
    if name == "tanh":
        return np.tanh(z)
    if name == "logistic":
        return 0.5 * (1.0 + np.tanh(0.5 * z))
    return z


def _act_grad(name: str, out: np.ndarray) -> np.ndarray:
    # derivative expressed through the activation output
    if name == "tanh":
        return 1.0 - out * out
    if name == "logistic":
        return out * (1.0 - out)
    return np.ones_like(out)


@dataclass
class GradientTape:
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    inputs: np.ndarray | None = None

    def is_finite(self) -> bool:
        return all(np.isfinite(g).all() for g in (*self.weights, *self.biases))

    def scaled(self, c: float) -> "GradientTape":
        return GradientTape([c * g for g in self.weights], [c * g for g in self.biases])

    def __add__(self, other: "GradientTape") -> "GradientTape":
        return GradientTape(
            [a + b for a, b in zip(self.weights, other.weights)],
            [a + b for a, b in zip(self.biases, other.biases)],
        )

    def flat(self) -> np.ndarray:
        return np.concatenate([g.ravel() for pair in zip(self.weights, self.biases) for g in pair])


@dataclass
class ForwardCache:
    activations: list[np.ndarray]


class DenseNet:
    """MLP with tanh hidden layers and a segmented output head.

    ``head`` lists ``(activation, width)`` segments of the output layer, which
    lets one trunk feed e.g. a tanh action head and a logistic weight head.
    Weights are stored as ``(fan_in, fan_out)`` so a batch ``x`` of shape
    ``(n, fan_in)`` maps through ``x @ W + b``.
    """

    def __init__(
        self,
        layer_sizes: Sequence[int],
        head: Sequence[tuple[str, int]] | str = "linear",
        hidden_activation: str = "tanh",
        seed: int | np.random.Generator | None = 0,
    ):
        if len(layer_sizes) < 2:
            raise ValueError("need at least input and output sizes")
        self.layer_sizes = [int(s) for s in layer_sizes]
        if isinstance(head, str):
            head = [(head, self.layer_sizes[-1])]
        self.head = [(str(a), int(w)) for a, w in head]
        if sum(w for _, w in self.head) != self.layer_sizes[-1]:
            raise ValueError("head segments must cover the output layer")
        for name in (hidden_activation, *(a for a, _ in self.head)):
            if name not in _ACTIVATIONS:
                raise ValueError(f"unknown activation {name!r}")
        self.hidden_activation = hidden_activation
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        self.weights: list[np.ndarray] = []
        self.biases: list[np.ndarray] = []
        for fan_in, fan_out in zip(self.layer_sizes[:-1], self.layer_sizes[1:]):
            bound = 1.0 / np.sqrt(fan_in)
            self.weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
            self.biases.append(rng.uniform(-bound, bound, size=fan_out))

    @property
    def n_in(self) -> int:
        return self.layer_sizes[0]

    @property
    def n_out(self) -> int:
        return self.layer_sizes[-1]

    def parameters(self) -> list[np.ndarray]:
        return [p for pair in zip(self.weights, self.biases) for p in pair]

    def copy(self) -> "DenseNet":
        new = object.__new__(DenseNet)
        new.layer_sizes = list(self.layer_sizes)
        new.head = list(self.head)
        new.hidden_activation = self.hidden_activation
        new.weights = [w.copy() for w in self.weights]
        new.biases = [b.copy() for b in self.biases]
        return new

    def _apply_head(self, z: np.ndarray) -> np.ndarray:
        if len(self.head) == 1:
            return _act(self.head[0][0], z)
        out = np.empty_like(z)
        start = 0
        for name, width in self.head:
            out[..., start:start + width] = _act(name, z[..., start:start + width])
            start += width
        return out

    def _head_grad(self, out: np.ndarray) -> np.ndarray:
        if len(self.head) == 1:
            return _act_grad(self.head[0][0], out)
        d = np.empty_like(out)
        start = 0
        for name, width in self.head:
            d[..., start:start + width] = _act_grad(name, out[..., start:start + width])
            start += width
        return d

    def forward(self, x: np.ndarray) -> tuple[np.ndarray, ForwardCache]:
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.n_in:
            raise ValueError(f"input width {x.shape[-1]} != {self.n_in}")
        acts = [x]
        h = x
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = h @ w + b
            h = self._apply_head(z) if i == last else _act(self.hidden_activation, z)
            acts.append(h)
        return h, ForwardCache(acts)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.forward(x)[0]

    def backward(self, cache: ForwardCache, grad_out: np.ndarray) -> GradientTape:
        """Gradients of a scalar loss given ``dL/d(output)`` for the cached pass.

        Batch contributions are summed; scale ``grad_out`` for a mean loss.
        """
        acts = cache.activations
        delta = np.asarray(grad_out, dtype=float) * self._head_grad(acts[-1])
        gw: list[np.ndarray] = [None] * len(self.weights)  # type: ignore[list-item]
        gb: list[np.ndarray] = [None] * len(self.weights)  # type: ignore[list-item]
        for i in range(len(self.weights) - 1, -1, -1):
            a = acts[i]
            if a.ndim == 1:
                gw[i] = np.outer(a, delta)
                gb[i] = delta.copy()
            else:
                gw[i] = a.T @ delta
                gb[i] = delta.sum(axis=0)
            delta = delta @ self.weights[i].T
            if i > 0:
                delta = delta * _act_grad(self.hidden_activation, a)
        return GradientTape(gw, gb, inputs=delta)

    def to_dict(self) -> dict:
        return {
            "version": CHECKPOINT_VERSION,
            "layer_sizes": self.layer_sizes,
            "head": [list(h) for h in self.head],
            "hidden_activation": self.hidden_activation,
            "weights": [w.ravel().tolist() for w in self.weights],
            "biases": [b.tolist() for b in self.biases],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "DenseNet":
        if data.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {data.get('version')!r}")
        net = cls(data["layer_sizes"], [tuple(h) for h in data["head"]],
                  data["hidden_activation"], seed=0)
        for i, (fi, fo) in enumerate(zip(net.layer_sizes[:-1], net.layer_sizes[1:])):
            net.weights[i] = np.array(data["weights"][i], dtype=float).reshape(fi, fo)
            net.biases[i] = np.array(data["biases"][i], dtype=float)
        return net


def forward(net: DenseNet, x: np.ndarray) -> np.ndarray:
    return net(x)


def backward(net: DenseNet, cache: ForwardCache, grad_out: np.ndarray) -> GradientTape:
    return net.backward(cache, grad_out)


def sgd_update(net: DenseNet, tape: GradientTape, learning_rate: float) -> bool:
    """In-place ``theta -= lr * grad``; returns False (and leaves ``net`` alone) on non-finite grads."""
    if not tape.is_finite():
        return False
    for w, g in zip(net.weights, tape.weights):
        w -= learning_rate * g
    for b, g in zip(net.biases, tape.biases):
        b -= learning_rate * g
    return True


class Adam:
    """Adam optimizer state for one network; same rejection rule as :func:`sgd_update`."""

    def __init__(self, net: DenseNet, learning_rate: float, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.lr = learning_rate
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = [np.zeros_like(p) for p in net.parameters()]
        self.v = [np.zeros_like(p) for p in net.parameters()]

    def step(self, net: DenseNet, tape: GradientTape) -> bool:
        if not tape.is_finite():
            return False
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        grads = [g for pair in zip(tape.weights, tape.biases) for g in pair]
        for p, g, m, v in zip(net.parameters(), grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return True


class SGD:
    def __init__(self, net: DenseNet, learning_rate: float):
        self.lr = learning_rate

    def step(self, net: DenseNet, tape: GradientTape) -> bool:
        return sgd_update(net, tape, self.lr)


def make_optimizer(kind: str, net: DenseNet, learning_rate: float) -> Adam | SGD:
    if kind == "adam":
        return Adam(net, learning_rate)
    if kind == "sgd":
        return SGD(net, learning_rate)
    raise ValueError(f"unknown optimizer {kind!r}")


def save_net(net: DenseNet, path: str | Path) -> None:
    Path(path).write_text(json.dumps(net.to_dict()), encoding="utf-8")


def load_net(path: str | Path) -> DenseNet:
    return DenseNet.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
