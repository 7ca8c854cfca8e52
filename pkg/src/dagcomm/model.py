"""Small tanh networks with summed softmax cross-entropy loss.

Two topologies, keys numbered in layer order with weight before bias:

``mlp``      x -> tanh(x W1 + b1) -> logits
             keys: 0 W1, 1 b1, 2 W2, 3 b2
``diamond``  x -> h0 -> (branch A || branch B) -> concat -> logits
             keys: 0 W0, 1 b0, 2 WA, 3 bA, 4 WB, 5 bB, 6 Wo, 7 bo

Layer widths are chosen so that every key has a distinct element count,
which makes any cross-rank key confusion visible as a count mismatch.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, random_uniform, zeros

TOPOLOGIES = ("mlp", "diamond")


@dataclass(frozen=True)
class Topology:
    name: str
    n_features: int
    n_classes: int
    hidden: int = 16
    branch_a: int = 12
    branch_b: int = 10

    def __post_init__(self) -> None:
        if self.name not in TOPOLOGIES:
            raise ValueError(f"unknown topology {self.name!r}; expected one of {TOPOLOGIES}")

    @classmethod
    def with_hidden(cls, name: str, n_features: int, n_classes: int, hidden: int = 16) -> "Topology":
        """Branch widths follow the hidden width: 3/4 and 5/8 of it."""
        if hidden < 8:
            raise ValueError("hidden width must be >= 8")
        return cls(name, n_features, n_classes, hidden, 3 * hidden // 4, 5 * hidden // 8)

    @property
    def shapes(self) -> list[tuple[int, ...]]:
        d, h, c = self.n_features, self.hidden, self.n_classes
        if self.name == "mlp":
            return [(d, h), (h,), (h, c), (c,)]
        a, b = self.branch_a, self.branch_b
        return [(d, h), (h,), (h, a), (a,), (h, b), (b,), (a + b, c), (c,)]

    @property
    def num_keys(self) -> int:
        return len(self.shapes)


def init_params(topo: Topology, seed: int) -> list[Tensor]:
    """Weights uniform in [-1, 1) / sqrt(fan_in); biases zero."""
    params = []
    for key, shape in enumerate(topo.shapes):
        if len(shape) == 2:
            w = random_uniform(shape, seed * 1009 + key)
            w.data *= 1.0 / np.sqrt(shape[0])
            params.append(w)
        else:
            params.append(zeros(shape))
    return params


# -- layer stages -----------------------------------------------------------------


def dense_tanh_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.tanh(x @ w + b)


def dense_tanh_backward(x: np.ndarray, h: np.ndarray, w: np.ndarray, dh: np.ndarray, need_dx: bool = True):
    dpre = dh * (1.0 - h * h)
    gw = x.T @ dpre
    gb = dpre.sum(axis=0)
    dx = dpre @ w.T if need_dx else None
    return gw, gb, dx


def softmax_xent_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray, labels: np.ndarray):
    """Summed cross-entropy over the rows of ``x`` and its gradient w.r.t. the logits."""
    z = x @ w + b
    z = z - z.max(axis=1, keepdims=True)
    ez = np.exp(z)
    denom = ez.sum(axis=1, keepdims=True)
    rows = np.arange(len(labels))
    loss = float(np.sum(np.log(denom[:, 0]) - z[rows, labels]))
    dz = ez / denom
    dz[rows, labels] -= 1.0
    return loss, dz


def dense_backward(x: np.ndarray, w: np.ndarray, dz: np.ndarray):
    return x.T @ dz, dz.sum(axis=0), dz @ w.T


def logits(topo: Topology, params: list[np.ndarray], x: np.ndarray) -> np.ndarray:
    if topo.name == "mlp":
        h1 = dense_tanh_forward(x, params[0], params[1])
        return h1 @ params[2] + params[3]
    h0 = dense_tanh_forward(x, params[0], params[1])
    ha = dense_tanh_forward(h0, params[2], params[3])
    hb = dense_tanh_forward(h0, params[4], params[5])
    return np.concatenate([ha, hb], axis=1) @ params[6] + params[7]


def loss(topo: Topology, params: list[np.ndarray], x: np.ndarray, labels: np.ndarray) -> float:
    """Summed cross-entropy; evaluated independently of the staged backward pass."""
    z = logits(topo, params, x)
    zmax = z.max(axis=1, keepdims=True)
    lse = zmax[:, 0] + np.log(np.exp(z - zmax).sum(axis=1))
    return float(np.sum(lse - z[np.arange(len(labels)), labels]))


def loss_and_grads(topo: Topology, params: list[np.ndarray], x: np.ndarray, labels: np.ndarray):
    """Serial forward/backward using the same stage functions the engine ops run."""
    if topo.name == "mlp":
        w1, b1, w2, b2 = params
        h1 = dense_tanh_forward(x, w1, b1)
        total, dz = softmax_xent_forward(h1, w2, b2, labels)
        g2w, g2b, dh1 = dense_backward(h1, w2, dz)
        g1w, g1b, _ = dense_tanh_backward(x, h1, w1, dh1, need_dx=False)
        return total, [g1w, g1b, g2w, g2b]
    w0, b0, wa, ba, wb, bb, wo, bo = params
    a = wa.shape[1]
    h0 = dense_tanh_forward(x, w0, b0)
    ha = dense_tanh_forward(h0, wa, ba)
    hb = dense_tanh_forward(h0, wb, bb)
    cat = np.concatenate([ha, hb], axis=1)
    total, dz = softmax_xent_forward(cat, wo, bo, labels)
    gow, gob, dcat = dense_backward(cat, wo, dz)
    gaw, gab, dh0a = dense_tanh_backward(h0, ha, wa, dcat[:, :a])
    gbw, gbb, dh0b = dense_tanh_backward(h0, hb, wb, dcat[:, a:])
    g0w, g0b, _ = dense_tanh_backward(x, h0, w0, dh0a + dh0b, need_dx=False)
    return total, [g0w, g0b, gaw, gab, gbw, gbb, gow, gob]


def sgd_step(w: np.ndarray, g: np.ndarray, lr: float, rescale: float) -> None:
    """``w <- w - lr * rescale * g`` in place."""
    w -= (lr * rescale) * g


def accuracy(topo: Topology, params: list[np.ndarray], x: np.ndarray, labels: np.ndarray) -> float:
    pred = np.argmax(logits(topo, params, x), axis=1)
    return float(np.mean(pred == labels))
