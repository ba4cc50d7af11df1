"""Small fully connected Q-network on numpy.

Hidden layers use a rectifier, the output layer is linear. The loss is the
squared error on the taken action's Q-value only; ``action_mask`` selects it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class MlpParams:
    weights: list  # weights[k] has shape (fan_in, fan_out)
    biases: list

    @property
    def sizes(self) -> tuple:
        return (self.weights[0].shape[0],) + tuple(w.shape[1] for w in self.weights)

    def copy(self) -> "MlpParams":
        return MlpParams([w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for pair in zip(self.weights, self.biases) for a in pair])

    def set_flat(self, vec: np.ndarray) -> None:
        k = 0
        for w, b in zip(self.weights, self.biases):
            for a in (w, b):
                a[...] = vec[k:k + a.size].reshape(a.shape)
                k += a.size

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.flat())))

    def to_dict(self) -> dict:
        return {"sizes": list(self.sizes),
                "weights": [w.tolist() for w in self.weights],
                "biases": [b.tolist() for b in self.biases]}

    @classmethod
    def from_dict(cls, d: dict) -> "MlpParams":
        ws = [np.asarray(w, dtype=float) for w in d["weights"]]
        bs = [np.asarray(b, dtype=float) for b in d["biases"]]
        params = cls(ws, bs)
        if list(params.sizes) != list(d.get("sizes", params.sizes)):
            raise ValueError("layer sizes do not match the stored weights")
        return params


def init_mlp(sizes, rng: np.random.Generator) -> MlpParams:
    """He-initialised weights, zero biases."""
    sizes = [int(s) for s in sizes]
    if len(sizes) < 2 or min(sizes) < 1:
        raise ValueError("need at least input and output sizes, all positive")
    ws, bs = [], []
    for fan_in, fan_out in zip(sizes, sizes[1:]):
        ws.append(rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, fan_out)))
        bs.append(np.zeros(fan_out))
    return MlpParams(ws, bs)


def zeros_like(params: MlpParams) -> MlpParams:
    return MlpParams([np.zeros_like(w) for w in params.weights], [np.zeros_like(b) for b in params.biases])


def _forward(params: MlpParams, x: np.ndarray):
    acts = [x]
    pre = []
    h = x
    last = len(params.weights) - 1
    for k, (w, b) in enumerate(zip(params.weights, params.biases)):
        z = h @ w + b
        pre.append(z)
        h = z if k == last else np.maximum(z, 0.0)
        acts.append(h)
    return acts, pre


def mlp_forward(params: MlpParams, x) -> np.ndarray:
    """Q-values for one input vector or a batch of rows."""
    x = np.asarray(x, dtype=float)
    acts, _ = _forward(params, x)
    return acts[-1]


def masked_loss(params: MlpParams, x, target_q, action_mask) -> float:
    """Mean over the batch of the masked squared error."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    q = mlp_forward(params, x)
    mask = np.atleast_2d(np.asarray(action_mask, dtype=float))
    diff = (q - np.atleast_2d(target_q)) * mask
    return float(np.sum(diff ** 2) / x.shape[0])


def mlp_backward(params: MlpParams, x, target_q, action_mask):
    """Analytic gradients of :func:`masked_loss`; returns (grads, loss)."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    n = x.shape[0]
    mask = np.atleast_2d(np.asarray(action_mask, dtype=float))
    acts, pre = _forward(params, x)
    diff = (acts[-1] - np.atleast_2d(target_q)) * mask
    loss = float(np.sum(diff ** 2) / n)
    delta = 2.0 * diff / n
    gw = [None] * len(params.weights)
    gb = [None] * len(params.biases)
    for k in range(len(params.weights) - 1, -1, -1):
        gw[k] = acts[k].T @ delta
        gb[k] = delta.sum(axis=0)
        if k > 0:
            delta = (delta @ params.weights[k].T) * (pre[k - 1] > 0)
    return MlpParams(gw, gb), loss


class SGD:
    """Plain gradient descent, optionally with classical momentum."""

    def __init__(self, learning_rate: float, momentum: float = 0.0):
        self.learning_rate = learning_rate
        self.momentum = momentum
        self._velocity = None

    def step(self, params: MlpParams, grads: MlpParams) -> None:
        lr = self.learning_rate
        if self.momentum == 0:
            for p, g in zip(params.weights + params.biases, grads.weights + grads.biases):
                p -= lr * g
            return
        if self._velocity is None:
            self._velocity = zeros_like(params)
        v = self._velocity
        for p, g, vel in zip(params.weights + params.biases, grads.weights + grads.biases, v.weights + v.biases):
            vel *= self.momentum
            vel -= lr * g
            p += vel
