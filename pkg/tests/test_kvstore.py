import numpy as np
import pytest

from dagcomm.collective import MismatchError, Transport
from dagcomm.engine import Engine
from dagcomm.kvstore import GradientSlot, KVStore, KVStoreConfig, setup_communicators
from dagcomm.tensor import Tensor, random_uniform
from dagcomm.trace import TraceSink, call_sequence, collective_intervals, max_concurrent_collectives

from helpers import serial_sum, spmd


class World:
    """R ranks, each with its own engine and store, sharing one transport."""

    def __init__(self, R, mode, num_keys=4, outstanding=2, engine_threads=4, latency=0.0, watchdog=5.0):
        self.sink = TraceSink()
        self.tp = Transport(R, watchdog, trace=self.sink, latency=latency)
        self.config = KVStoreConfig(mode, num_keys, outstanding)
        self.comms = setup_communicators(self.tp, self.config)
        self.tp.seal()
        self.engines = [Engine(engine_threads, trace=self.sink, rank=r) for r in range(R)]
        self.stores = [KVStore.create(self.engines[r], self.tp, r, self.config, self.comms) for r in range(R)]
        self.R = R

    def slot(self, r, value):
        return GradientSlot(Tensor(np.array(value, dtype=float)), self.engines[r].new_variable())

    def run(self, fn):
        out = spmd(self.R, fn)
        for e in self.engines:
            e.shutdown()
        return out


def test_create_state_per_mode():
    assert World(2, "funnel").comms == []
    w = World(2, "concom", outstanding=2)
    assert len(w.comms) == 2 and w.tp.communicators() == [0] + w.comms
    assert World(2, "depcha").stores[0].dummy_tag is not None
    assert World(2, "naive").stores[0].dummy_tag is None


def test_concom_requires_matching_communicators():
    tp = Transport(1, 1.0)
    with pytest.raises(ValueError):
        KVStore(Engine(1), tp, 0, KVStoreConfig("concom", 2, 2), [])
    with pytest.raises(ValueError):
        KVStoreConfig("bogus", 1)


def test_init_broadcasts_rank0_weights():
    w = World(3, "depcha", num_keys=2)
    weights = {}

    def body(r):
        slots = [w.slot(r, random_uniform((4,), 10 + k).data if r == 0 else np.zeros(4)) for k in range(2)]
        for k, s in enumerate(slots):
            w.stores[r].init(k, s)
        w.engines[r].wait_all()
        weights[r] = [s.value.numpy() for s in slots]

    assert w.run(body) == [None] * 3
    for r in range(3):
        for k in range(2):
            assert np.array_equal(weights[r][k], random_uniform((4,), 10 + k).data)


def test_init_single_rank_unchanged():
    w = World(1, "funnel", num_keys=1)
    s = w.slot(0, [1.0, 2.0])
    w.stores[0].init(0, s)
    w.engines[0].wait_all()
    assert s.value.data.tolist() == [1.0, 2.0]
    w.run(lambda r: None)


def test_init_keys_match_by_world_sequence():
    K = 6
    w = World(2, "concom", num_keys=K)

    def body(r):
        for k in range(K):
            w.stores[r].init(k, w.slot(r, np.zeros(k + 1)))
        w.engines[r].wait_all()

    w.run(body)
    for r in range(2):
        assert call_sequence(w.sink.events(), r) == [("broadcast", k) for k in range(K)]
    seqs = sorted({e["seq"] for e in w.sink.events() if e["event"] == "coll_matched"})
    assert seqs == list(range(K))


def test_init_errors():
    w = World(1, "funnel", num_keys=2)
    s = w.slot(0, [1.0])
    w.stores[0].init(0, s)
    with pytest.raises(KeyError):
        w.stores[0].init(0, s)
    with pytest.raises(KeyError):
        w.stores[0].init(5, s)
    w.run(lambda r: w.engines[r].wait_all())


def test_init_shape_disagreement_is_mismatch():
    w = World(2, "funnel", num_keys=1)

    def body(r):
        w.stores[r].init(0, w.slot(r, np.zeros(3 + r)))
        w.engines[r].wait_all()

    out = w.run(body)
    assert any(isinstance(e, MismatchError) for e in out)


def test_funnel_push_sums_on_return():
    w = World(2, "funnel", num_keys=1)
    grads = [[1.0, 2.0], [3.0, 4.0]]
    seen = {}

    def body(r):
        store = w.stores[r]
        store.init(0, w.slot(r, [0.0, 0.0]))
        w.engines[r].wait_all()
        store.push(0, w.slot(r, grads[r]))
        seen[r] = store.comm_buf[0].numpy()

    w.run(body)
    assert seen[0].tolist() == [4.0, 6.0] == seen[1].tolist()


def test_depcha_push_issues_no_collective():
    w = World(2, "depcha", num_keys=1)

    def body(r):
        store = w.stores[r]
        store.init(0, w.slot(r, [0.0]))
        w.engines[r].wait_all()
        g = w.slot(r, [float(r)])
        store.push(0, g)
        w.engines[r].wait_all()
        allreduces = [e for e in w.sink.events()
                      if e["event"] == "coll_enqueued" and e["kind"] == "allreduce" and e["rank"] == r]
        assert allreduces == []
        store.pull(0, g)
        w.engines[r].wait_all()
        return g.value.data.tolist()

    assert w.run(body) == [[1.0], [1.0]]


def test_concom_keys_hash_onto_communicators():
    w = World(2, "concom", num_keys=4, outstanding=2)

    def body(r):
        store = w.stores[r]
        slots = [w.slot(r, np.ones(k + 1)) for k in range(4)]
        for k in range(4):
            store.init(k, slots[k])
        w.engines[r].wait_all()
        for k in range(4):
            store.push(k, slots[k])
            store.pull(k, slots[k])
            if (k + 1) % 2 == 0:
                store.barrier()
        w.engines[r].wait_all()

    assert w.run(body) == [None, None]
    key_comm = {e["key"]: e["comm"] for e in w.sink.events()
                if e["event"] == "coll_enqueued" and e["kind"] == "allreduce"}
    assert key_comm == {0: w.comms[0], 1: w.comms[1], 2: w.comms[0], 3: w.comms[1]}


def test_pull_contract_errors():
    w = World(1, "funnel", num_keys=2)
    store = w.stores[0]
    s = w.slot(0, [0.0, 0.0])
    with pytest.raises(KeyError):
        store.push(0, s)
    store.init(0, s)
    w.engines[0].wait_all()
    with pytest.raises(RuntimeError):
        store.pull(0, s)
    with pytest.raises(ValueError):
        store.push(0, w.slot(0, [1.0]))
    w.run(lambda r: None)


def test_barrier_is_noop_outside_concom():
    for mode in ("funnel", "depcha", "naive"):
        w = World(2, mode)
        w.stores[0].barrier()  # would hang for rank 1 if it issued a collective
        w.run(lambda r: None)
        assert [e for e in w.sink.events() if e["kind"] == "barrier"] == []


def test_concom_barrier_without_pushes():
    w = World(2, "concom")
    w.run(lambda r: w.stores[r].barrier())
    assert len([e for e in w.sink.events() if e["event"] == "coll_done" and e["kind"] == "barrier"]) == 2


def test_concom_barrier_waits_for_in_flight_allreduces():
    w = World(2, "concom", num_keys=2, outstanding=2, latency=0.05)
    observed = {}

    def body(r):
        store = w.stores[r]
        slots = [w.slot(r, np.ones(k + 1)) for k in range(2)]
        for k in range(2):
            store.init(k, slots[k])
        w.engines[r].wait_all()
        for k in range(2):
            store.push(k, slots[k])
        observed[(r, "before")] = store.mpi_outstanding
        store.barrier()
        observed[(r, "after")] = store.mpi_outstanding
        w.engines[r].wait_all()

    assert w.run(body) == [None, None]
    for r in range(2):
        assert observed[(r, "before")] >= 1
        assert observed[(r, "after")] == 0
    evs = w.sink.events()
    for r in range(2):
        ar_done = max(e["t_us"] for e in evs if e["rank"] == r and e["event"] == "coll_done"
                      and e["kind"] == "allreduce")
        bar_start = min(e["t_us"] for e in evs if e["rank"] == r and e["event"] == "coll_enqueued"
                        and e["kind"] == "barrier")
        assert bar_start >= ar_done


# -- invariants ----------------------------------------------------------------------


def _train_like(w, K, iters, seed):
    """Drive the per-mode push/pull loop with seeded gradients; return pulled values."""
    mode, R = w.config.mode, w.R
    grads = {(r, it, k): random_uniform((k + 2,), seed * 10_000 + it * 100 + k * 10 + r).data
             for r in range(R) for it in range(iters) for k in range(K)}
    pulled = {}

    def body(r):
        store, eng = w.stores[r], w.engines[r]
        slots = [w.slot(r, np.zeros(k + 2)) for k in range(K)]
        for k in range(K):
            store.init(k, slots[k])
        eng.wait_all()
        for it in range(iters):
            for k in range(K):
                # stands in for the backward pass writing g[k]
                eng.push(lambda s=slots[k], v=grads[(r, it, k)]: np.copyto(s.value.data, v),
                         mutates=[slots[k].tag], kind="compute", key=k)
            if mode in ("funnel", "concom"):
                for k in range(K):
                    store.push(k, slots[k])
                    store.pull(k, slots[k])
                    if mode == "concom" and (k + 1) % w.config.outstanding == 0:
                        store.barrier()
                store.end_iteration()
            else:
                for k in range(K):
                    store.push(k, slots[k])
                for k in range(K):
                    store.pull(k, slots[k])
            for k in range(K):
                eng.wait_for(slots[k].tag)
                pulled[(r, it, k)] = slots[k].value.numpy()
        eng.wait_all()

    out = w.run(body)
    return out, grads, pulled


@pytest.mark.parametrize("mode", ["funnel", "depcha", "concom"])
@pytest.mark.parametrize("R", [2, 3])
def test_aggregation_correctness(mode, R):
    K, iters = 5, 3
    w = World(R, mode, num_keys=K, outstanding=2)
    out, grads, pulled = _train_like(w, K, iters, seed=R)
    assert out == [None] * R
    for it in range(iters):
        for k in range(K):
            expected = serial_sum([grads[(r, it, k)] for r in range(R)])
            for r in range(R):
                assert np.max(np.abs(pulled[(r, it, k)] - expected)) <= 1e-12


@pytest.mark.parametrize("mode", ["funnel", "depcha"])
def test_order_consistency(mode):
    K = 8
    w = World(2, mode, num_keys=K)
    out, _, _ = _train_like(w, K, iters=2, seed=5)
    assert out == [None, None]
    evs = w.sink.events()
    seq0 = call_sequence(evs, 0)
    assert seq0 == call_sequence(evs, 1)
    allreduce_keys = [k for kind, k in seq0 if kind == "allreduce"]
    assert allreduce_keys == list(range(K)) * 2


def test_concom_window_discipline():
    K, out_n = 7, 3
    w = World(2, "concom", num_keys=K, outstanding=out_n, latency=0.002)
    out, _, _ = _train_like(w, K, iters=2, seed=9)
    assert out == [None, None]
    evs = w.sink.events()
    for r in range(2):
        windows, current = [], []
        for e in evs:
            if e["rank"] != r or e["event"] != "coll_enqueued":
                continue
            if e["kind"] == "barrier":
                windows.append(current)
                current = []
            elif e["kind"] == "allreduce":
                current.append(e["comm"])
        assert current == []
        for comms in windows:
            assert len(comms) <= out_n and len(set(comms)) == len(comms)
        intervals = [iv for iv in collective_intervals(evs)[r] if iv[2]["kind"] == "allreduce"]
        for s, e, _ in intervals:
            assert sum(1 for s2, e2, _ in intervals if s2 < e and s < e2) <= out_n


def test_funnel_serialization():
    w = World(2, "funnel", num_keys=4, engine_threads=4, latency=0.002)
    out, _, _ = _train_like(w, 4, iters=2, seed=1)
    assert out == [None, None]
    assert max_concurrent_collectives(w.sink.events()) == 1


def test_naive_single_engine_thread_never_fails():
    for seed in range(3):
        w = World(2, "naive", num_keys=6, engine_threads=1)
        out, grads, pulled = _train_like(w, 6, iters=2, seed=seed)
        assert out == [None, None]
