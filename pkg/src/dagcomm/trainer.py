"""Synchronous data-parallel SGD driven through the engine and the kvstore.

Each simulated worker owns a control thread, an :class:`Engine` and a
:class:`KVStore`; workers share only the :class:`Transport`. The per-mode
iteration bodies follow the three training loops:

* funnel / concom: for each key, push, pull, update (concom also barriers
  after every ``outstanding`` keys);
* depcha / naive: push every key, then pull and update every key.
"""

from __future__ import annotations

import logging
import threading
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import model as M
from .collective import CollectiveError, Transport, TransportAborted
from .engine import Engine, Tag
from .kvstore import KVStore, KVStoreConfig, GradientSlot, setup_communicators
from .model import Topology
from .tensor import Tensor
from .trace import TraceSink

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Dataset:
    x: np.ndarray
    y: np.ndarray

    def __len__(self) -> int:
        return len(self.y)


@dataclass(frozen=True)
class Batch:
    inputs: np.ndarray
    labels: np.ndarray


@dataclass(frozen=True)
class Hyperparams:
    learning_rate: float = 0.5
    global_batch_size: int = 128
    epochs: int = 5
    seed: int = 0

    def __post_init__(self) -> None:
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.global_batch_size < 1 or self.epochs < 1:
            raise ValueError("global_batch_size and epochs must be positive")


@dataclass
class EpochStats:
    epoch_time: float
    train_loss: float


def generate_dataset(seed: int, n_samples: int, n_features: int, n_classes: int,
                     noise: float = 1.0) -> tuple[Dataset, Dataset]:
    """Gaussian blobs around random class centers; 90/10 train/test split."""
    if not n_samples >= n_classes >= 2:
        raise ValueError("need n_samples >= n_classes >= 2")
    rng = np.random.default_rng(seed)
    centers = rng.normal(0.0, 1.5, size=(n_classes, n_features))
    y = rng.integers(0, n_classes, size=n_samples)
    x = centers[y] + noise * rng.normal(size=(n_samples, n_features))
    n_train = n_samples - n_samples // 10
    return Dataset(x[:n_train], y[:n_train]), Dataset(x[n_train:], y[n_train:])


def num_iterations(train: Dataset, global_batch_size: int) -> int:
    return len(train) // global_batch_size


def global_batch(train: Dataset, iteration: int, global_batch_size: int) -> Batch:
    lo = iteration * global_batch_size
    if lo + global_batch_size > len(train):
        raise IndexError(f"iteration {iteration} past end of data")
    return Batch(train.x[lo:lo + global_batch_size], train.y[lo:lo + global_batch_size])


def shard(train: Dataset, rank: int, num_ranks: int, iteration: int, global_batch_size: int) -> Batch:
    """Rows ``[rank*B, (rank+1)*B)`` of the iteration's global batch, ``B = global/num_ranks``."""
    if global_batch_size % num_ranks:
        raise ValueError(f"global batch {global_batch_size} not divisible by {num_ranks} ranks")
    full = global_batch(train, iteration, global_batch_size)
    b = global_batch_size // num_ranks
    return Batch(full.inputs[rank * b:(rank + 1) * b], full.labels[rank * b:(rank + 1) * b])


class Model:
    """One worker's weights, gradients and activation buffers, each behind a tag."""

    def __init__(self, topo: Topology, engine: Engine, params: list[Tensor]) -> None:
        if [p.shape for p in params] != topo.shapes:
            raise ValueError("parameter shapes do not match topology")
        self.topo = topo
        self.engine = engine
        self.w = [GradientSlot(p, engine.new_variable(), k) for k, p in enumerate(params)]
        self.g = [GradientSlot(Tensor(np.zeros(p.shape)), engine.new_variable(), k)
                  for k, p in enumerate(params)]
        self.acts: dict[str, np.ndarray] = {}
        self._act_tags: dict[str, Tag] = {}
        self.batch_losses: list[float] = []
        self._loss_tag = engine.new_variable()

    @property
    def num_keys(self) -> int:
        return len(self.w)

    def act(self, name: str) -> Tag:
        if name not in self._act_tags:
            self._act_tags[name] = self.engine.new_variable()
        return self._act_tags[name]

    def params(self) -> list[np.ndarray]:
        return [s.value.data for s in self.w]


def forward_backward(model: Model, batch: Batch) -> None:
    """Push the forward and backward stages; leaves summed per-key gradients in ``model.g``."""
    eng, acts, w, g = model.engine, model.acts, model.w, model.g
    x, labels = batch.inputs, batch.labels

    def set_grad(key: int, value: np.ndarray) -> None:
        np.copyto(g[key].value.data, value)

    def record_loss(value: float) -> None:
        model.batch_losses.append(value)

    if model.topo.name == "mlp":
        def fwd1():
            acts["h1"] = M.dense_tanh_forward(x, w[0].value.data, w[1].value.data)

        def fwd2():
            total, acts["dz"] = M.softmax_xent_forward(acts["h1"], w[2].value.data, w[3].value.data, labels)
            record_loss(total)

        def bwd2():
            gw, gb, acts["dh1"] = M.dense_backward(acts["h1"], w[2].value.data, acts["dz"])
            set_grad(2, gw)
            set_grad(3, gb)

        def bwd1():
            gw, gb, _ = M.dense_tanh_backward(x, acts["h1"], w[0].value.data, acts["dh1"], need_dx=False)
            set_grad(0, gw)
            set_grad(1, gb)

        h1, dz, dh1 = model.act("h1"), model.act("dz"), model.act("dh1")
        eng.push(fwd1, reads=[w[0].tag, w[1].tag], mutates=[h1], kind="compute")
        eng.push(fwd2, reads=[h1, w[2].tag, w[3].tag], mutates=[dz, model._loss_tag], kind="compute")
        eng.push(bwd2, reads=[dz, h1, w[2].tag], mutates=[g[2].tag, g[3].tag, dh1], kind="compute", key=2)
        eng.push(bwd1, reads=[dh1, h1, w[0].tag], mutates=[g[0].tag, g[1].tag], kind="compute", key=0)
        return

    a = model.topo.branch_a

    def fwd0():
        acts["h0"] = M.dense_tanh_forward(x, w[0].value.data, w[1].value.data)

    def fwd_a():
        acts["ha"] = M.dense_tanh_forward(acts["h0"], w[2].value.data, w[3].value.data)

    def fwd_b():
        acts["hb"] = M.dense_tanh_forward(acts["h0"], w[4].value.data, w[5].value.data)

    def fwd_out():
        acts["cat"] = np.concatenate([acts["ha"], acts["hb"]], axis=1)
        total, acts["dz"] = M.softmax_xent_forward(acts["cat"], w[6].value.data, w[7].value.data, labels)
        record_loss(total)

    def bwd_out():
        gw, gb, dcat = M.dense_backward(acts["cat"], w[6].value.data, acts["dz"])
        set_grad(6, gw)
        set_grad(7, gb)
        acts["dha"], acts["dhb"] = dcat[:, :a], dcat[:, a:]

    def bwd_a():
        gw, gb, acts["dh0a"] = M.dense_tanh_backward(acts["h0"], acts["ha"], w[2].value.data, acts["dha"])
        set_grad(2, gw)
        set_grad(3, gb)

    def bwd_b():
        gw, gb, acts["dh0b"] = M.dense_tanh_backward(acts["h0"], acts["hb"], w[4].value.data, acts["dhb"])
        set_grad(4, gw)
        set_grad(5, gb)

    def bwd0():
        gw, gb, _ = M.dense_tanh_backward(x, acts["h0"], w[0].value.data,
                                          acts["dh0a"] + acts["dh0b"], need_dx=False)
        set_grad(0, gw)
        set_grad(1, gb)

    h0, ha, hb, dz = model.act("h0"), model.act("ha"), model.act("hb"), model.act("dz")
    dha, dhb, dh0a, dh0b = model.act("dha"), model.act("dhb"), model.act("dh0a"), model.act("dh0b")
    eng.push(fwd0, reads=[w[0].tag, w[1].tag], mutates=[h0], kind="compute")
    eng.push(fwd_a, reads=[h0, w[2].tag, w[3].tag], mutates=[ha], kind="compute")
    eng.push(fwd_b, reads=[h0, w[4].tag, w[5].tag], mutates=[hb], kind="compute")
    # dz tag also guards acts["cat"]
    eng.push(fwd_out, reads=[ha, hb, w[6].tag, w[7].tag], mutates=[dz, model._loss_tag], kind="compute")
    eng.push(bwd_out, reads=[dz, w[6].tag], mutates=[g[6].tag, g[7].tag, dha, dhb], kind="compute", key=6)
    eng.push(bwd_a, reads=[dha, h0, ha, w[2].tag], mutates=[g[2].tag, g[3].tag, dh0a], kind="compute", key=2)
    eng.push(bwd_b, reads=[dhb, h0, hb, w[4].tag], mutates=[g[4].tag, g[5].tag, dh0b], kind="compute", key=4)
    eng.push(bwd0, reads=[dh0a, dh0b, h0, w[0].tag], mutates=[g[0].tag, g[1].tag], kind="compute", key=0)


def sgd_update(model: Model, key: int, learning_rate: float, rescale: float) -> None:
    """Push ``w[key] <- w[key] - lr * rescale * g[key]``."""
    w, g = model.w[key], model.g[key]
    model.engine.push(lambda: M.sgd_step(w.value.data, g.value.data, learning_rate, rescale),
                      reads=[g.tag], mutates=[w.tag], kind="update", key=key)


def train_iteration(mode: str, model: Model, store: KVStore, batch: Batch, hp: Hyperparams) -> None:
    rescale = 1.0 / hp.global_batch_size
    forward_backward(model, batch)
    keys = range(model.num_keys)
    if mode in ("funnel", "concom"):
        for key in keys:
            store.push(key, model.g[key])
            store.pull(key, model.g[key])
            sgd_update(model, key, hp.learning_rate, rescale)
            if mode == "concom" and (key + 1) % store.config.outstanding == 0:
                store.barrier()
        store.end_iteration()
    elif mode in ("depcha", "naive"):
        for key in keys:
            store.push(key, model.g[key])
        for key in keys:
            store.pull(key, model.g[key])
            sgd_update(model, key, hp.learning_rate, rescale)
    else:
        raise ValueError(f"unknown mode {mode!r}")


def mean_loss(model_or_topo, params: list[np.ndarray], data: Dataset) -> float:
    topo = model_or_topo.topo if isinstance(model_or_topo, Model) else model_or_topo
    return M.loss(topo, params, data.x, data.y) / len(data)


def train_epoch(mode: str, model: Model, store: KVStore, train: Dataset, hp: Hyperparams,
                rank: int, num_ranks: int) -> EpochStats:
    start = time.perf_counter()
    for it in range(num_iterations(train, hp.global_batch_size)):
        train_iteration(mode, model, store, shard(train, rank, num_ranks, it, hp.global_batch_size), hp)
    model.engine.wait_all()
    elapsed = time.perf_counter() - start
    return EpochStats(elapsed, mean_loss(model, model.params(), train))


def evaluate(model_or_topo, params: list[np.ndarray], test: Dataset) -> float:
    topo = model_or_topo.topo if isinstance(model_or_topo, Model) else model_or_topo
    return M.accuracy(topo, params, test.x, test.y)


# -- multi-worker orchestration ---------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    mode: str = "depcha"
    workers: int = 2
    engine_threads: int = 4
    outstanding: int = 2
    topology: str = "diamond"
    n_samples: int = 1280
    n_features: int = 8
    n_classes: int = 2
    hidden: int = 16
    hp: Hyperparams = field(default_factory=Hyperparams)
    watchdog: float = 5.0
    latency: float = 0.0


@dataclass
class WorkerResult:
    rank: int
    epochs: list[EpochStats] = field(default_factory=list)
    params: Optional[list[np.ndarray]] = None
    accuracy: Optional[float] = None
    error: Optional[BaseException] = None


@dataclass
class TrainResult:
    config: TrainConfig
    workers: list[WorkerResult]
    error: Optional[BaseException] = None

    @property
    def params(self) -> list[np.ndarray]:
        return self.workers[0].params


def _root_cause(results: list[WorkerResult], transport: Transport) -> Optional[BaseException]:
    errors = [r.error for r in results if r.error is not None]
    if not errors:
        return None
    if transport.error is not None:
        return transport.error
    for err in errors:
        if not isinstance(err, TransportAborted):
            return err
    return errors[0]


def _worker(rank: int, cfg: TrainConfig, topo: Topology, transport: Transport, comms: list[int],
            train: Dataset, test: Dataset, trace: Optional[TraceSink], result: WorkerResult) -> None:
    engine = Engine(cfg.engine_threads, trace=trace, rank=rank, name=f"rank{rank}")
    try:
        params = M.init_params(topo, cfg.hp.seed) if rank == 0 else [Tensor(np.zeros(s)) for s in topo.shapes]
        model = Model(topo, engine, params)
        store = KVStore.create(engine, transport, rank,
                               KVStoreConfig(cfg.mode, topo.num_keys, cfg.outstanding), comms)
        for key in range(model.num_keys):
            store.init(key, model.w[key])
        engine.wait_all()
        for _ in range(cfg.hp.epochs):
            result.epochs.append(train_epoch(cfg.mode, model, store, train, cfg.hp, rank, cfg.workers))
        result.params = [p.copy() for p in model.params()]
        result.accuracy = evaluate(model, result.params, test)
    except BaseException as exc:  # noqa: BLE001 - reported through TrainResult
        result.error = exc
        log.debug("rank %d failed: %r", rank, exc)
        # wake peers blocked in collectives that this rank will now never issue
        if not isinstance(exc, CollectiveError):
            transport._abort(CollectiveError(f"rank {rank} failed: {exc!r}"))
    finally:
        try:
            engine.wait_all()
        except BaseException:  # noqa: BLE001 - first error already captured
            pass
        engine.shutdown()


def run_training(cfg: TrainConfig, trace: Optional[TraceSink] = None) -> TrainResult:
    """Spawn ``cfg.workers`` worker threads over one transport and train."""
    if cfg.hp.global_batch_size % cfg.workers:
        raise ValueError(f"global batch {cfg.hp.global_batch_size} not divisible by {cfg.workers} workers")
    topo = Topology.with_hidden(cfg.topology, cfg.n_features, cfg.n_classes, cfg.hidden)
    train, test = generate_dataset(cfg.hp.seed, cfg.n_samples, cfg.n_features, cfg.n_classes)
    if num_iterations(train, cfg.hp.global_batch_size) < 1:
        raise ValueError("training set smaller than one global batch")
    transport = Transport(cfg.workers, cfg.watchdog, trace=trace, latency=cfg.latency)
    comms = setup_communicators(transport, KVStoreConfig(cfg.mode, topo.num_keys, cfg.outstanding))
    transport.seal()
    results = [WorkerResult(r) for r in range(cfg.workers)]
    threads = [
        threading.Thread(target=_worker, name=f"worker{r}",
                         args=(r, cfg, topo, transport, comms, train, test, trace, results[r]))
        for r in range(cfg.workers)
    ]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    return TrainResult(cfg, results, _root_cause(results, transport))


def serial_sgd(topology: str, hp: Hyperparams, n_samples: int = 1280, n_features: int = 8,
               n_classes: int = 2, hidden: int = 16) -> tuple[list[np.ndarray], list[float]]:
    """Plain single-process SGD on the same global batches; no engine, no transport.

    Returns the final weights and the per-epoch mean training loss.
    """
    topo = Topology.with_hidden(topology, n_features, n_classes, hidden)
    train, _ = generate_dataset(hp.seed, n_samples, n_features, n_classes)
    params = [p.data for p in M.init_params(topo, hp.seed)]
    rescale = 1.0 / hp.global_batch_size
    losses = []
    for _ in range(hp.epochs):
        for it in range(num_iterations(train, hp.global_batch_size)):
            batch = global_batch(train, it, hp.global_batch_size)
            _, grads = M.loss_and_grads(topo, params, batch.inputs, batch.labels)
            for w, g in zip(params, grads):
                M.sgd_step(w, g, hp.learning_rate, rescale)
        losses.append(M.loss(topo, params, train.x, train.y) / len(train))
    return params, losses
