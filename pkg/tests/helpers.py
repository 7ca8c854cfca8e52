import threading

import numpy as np

from dagcomm.engine import Engine
from dagcomm.model import loss
from dagcomm.tensor import Tensor, random_uniform
from dagcomm.trainer import Model, forward_backward


def spmd(num_ranks, fn, timeout=30.0):
    """Run ``fn(rank)`` on one thread per rank; return per-rank results or exceptions."""
    out = [None] * num_ranks

    def target(r):
        try:
            out[r] = fn(r)
        except BaseException as exc:  # noqa: BLE001
            out[r] = exc

    threads = [threading.Thread(target=target, args=(r,)) for r in range(num_ranks)]
    for t in threads:
        t.start()
    for t in threads:
        t.join(timeout)
        assert not t.is_alive(), "rank thread hung"
    return out


def serial_sum(arrays):
    """Elementwise sum by explicit loops, in list order."""
    total = np.zeros_like(arrays[0])
    for a in arrays:
        for i in np.ndindex(a.shape):
            total[i] += a[i]
    return total


def random_params(topo, seed, scale=1.0):
    return [random_uniform(s, seed * 97 + k).data * scale for k, s in enumerate(topo.shapes)]


def engine_grads(topo, params, batch, threads=4, trace=None):
    """Gradients produced by the staged engine forward/backward path."""
    eng = Engine(threads, trace=trace)
    model = Model(topo, eng, [Tensor(p.copy()) for p in params])
    forward_backward(model, batch)
    eng.wait_all()
    eng.shutdown()
    return [g.value.numpy() for g in model.g], model


def central_diff(topo, params, batch, h=1e-5):
    grads = []
    for k, p in enumerate(params):
        g = np.zeros_like(p)
        for idx in np.ndindex(p.shape):
            plus = [q.copy() for q in params]
            minus = [q.copy() for q in params]
            plus[k][idx] += h
            minus[k][idx] -= h
            g[idx] = (loss(topo, plus, batch.inputs, batch.labels)
                      - loss(topo, minus, batch.inputs, batch.labels)) / (2 * h)
        grads.append(g)
    return grads
