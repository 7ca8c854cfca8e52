"""Per-worker key-value store that aggregates gradients with collectives.

Four modes, differing only in which thread issues the allreduce and how its
order is pinned down across ranks:

``funnel``  the control thread waits for the copy into the communication
            buffer, then runs the allreduce itself on the world communicator.
``concom``  the allreduce runs as an engine op on one of ``outstanding``
            extra communicators (``key % outstanding``); the caller must
            barrier after every ``outstanding`` keys.
``depcha``  push only copies; pull runs allreduce + copy-back as one engine op
            that also mutates a shared dummy tag, so the engine executes them
            in push order.
``naive``   depcha without the dummy tag. Unordered; exists to demonstrate the
            failure.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Optional, Sequence

from . import tensor as T
from .collective import Transport
from .engine import Engine, Tag
from .tensor import Tensor

MODES = ("funnel", "depcha", "concom", "naive")


@dataclass
class GradientSlot:
    """A tensor plus the engine tag that guards it."""

    value: Tensor
    tag: Tag
    key: Optional[int] = None


@dataclass(frozen=True)
class KVStoreConfig:
    mode: str
    num_keys: int
    outstanding: int = 1

    def __post_init__(self) -> None:
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        if self.num_keys < 1:
            raise ValueError("num_keys must be positive")
        if self.outstanding < 1:
            raise ValueError("outstanding must be positive")


def setup_communicators(transport: Transport, config: KVStoreConfig) -> list[int]:
    """Create the extra communicators a mode needs. Call once, before workers start."""
    if config.mode != "concom":
        return []
    return [transport.new_communicator() for _ in range(config.outstanding)]


class KVStore:
    def __init__(
        self,
        engine: Engine,
        transport: Transport,
        rank: int,
        config: KVStoreConfig,
        communicators: Sequence[int] = (),
    ) -> None:
        if config.mode == "concom" and len(communicators) != config.outstanding:
            raise ValueError(
                f"concom needs {config.outstanding} communicators, got {len(communicators)}")
        self.engine = engine
        self.transport = transport
        self.rank = rank
        self.config = config
        self.mode = config.mode
        self.communicators = list(communicators)
        self.comm_buf: dict[int, Tensor] = {}
        self.comm_buf_tag: dict[int, Tag] = {}
        self.dummy_tag: Optional[Tag] = engine.new_variable() if self.mode == "depcha" else None
        self._init_tag = engine.new_variable()
        self._pushed: set[int] = set()
        self._outstanding = 0
        self._outstanding_cv = threading.Condition()
        self._since_barrier = 0

    @classmethod
    def create(cls, engine: Engine, transport: Transport, rank: int, config: KVStoreConfig,
               communicators: Sequence[int] = ()) -> "KVStore":
        return cls(engine, transport, rank, config, communicators)

    @property
    def mpi_outstanding(self) -> int:
        with self._outstanding_cv:
            return self._outstanding

    def _check_key(self, key: int, slot: Optional[GradientSlot] = None) -> None:
        if key not in self.comm_buf:
            raise KeyError(f"key {key} not initialized")
        if slot is not None and slot.value.shape != self.comm_buf[key].shape:
            raise ValueError(
                f"key {key}: shape {slot.value.shape} != registered {self.comm_buf[key].shape}")

    # -- API ----------------------------------------------------------------------

    def init(self, key: int, weight: GradientSlot) -> None:
        """Register ``key`` and broadcast rank 0's ``weight`` to every rank."""
        if not 0 <= key < self.config.num_keys:
            raise KeyError(f"key {key} outside 0..{self.config.num_keys - 1}")
        if key in self.comm_buf:
            raise KeyError(f"key {key} already initialized")
        self.comm_buf[key] = T.zeros(weight.value.shape)
        self.comm_buf_tag[key] = self.engine.new_variable()
        transport, rank, value = self.transport, self.rank, weight.value

        def initialize_key() -> None:
            transport.broadcast(transport.world, rank, 0, value, key=key)

        # non-root ranks are written, and the init chain pins issue order
        self.engine.push(initialize_key, mutates=[weight.tag, self._init_tag], kind="init", key=key)

    def push(self, key: int, grad: GradientSlot) -> None:
        self._check_key(key, grad)
        buf, buf_tag = self.comm_buf[key], self.comm_buf_tag[key]
        src = grad.value
        self.engine.push(lambda: T.copy(src, buf), reads=[grad.tag], mutates=[buf_tag],
                         kind="copy", key=key)
        self._pushed.add(key)
        if self.mode == "funnel":
            self.engine.wait_for(buf_tag)
            self.transport.allreduce_sum(self.transport.world, self.rank, buf, key=key)
        elif self.mode == "concom":
            self.engine.wait_for(buf_tag)
            comm = self.communicators[key % self.config.outstanding]
            transport, rank = self.transport, self.rank

            def allreduce() -> None:
                try:
                    transport.allreduce_sum(comm, rank, buf, key=key)
                finally:
                    self._release_outstanding()

            with self._outstanding_cv:
                self._outstanding += 1
            self._since_barrier += 1
            try:
                self.engine.push(allreduce, reads=[grad.tag], mutates=[buf_tag], kind="comm", key=key)
            except BaseException:
                self._release_outstanding()
                raise

    def _release_outstanding(self) -> None:
        with self._outstanding_cv:
            self._outstanding -= 1
            self._outstanding_cv.notify_all()

    def pull(self, key: int, out: GradientSlot) -> None:
        self._check_key(key, out)
        if key not in self._pushed:
            raise RuntimeError(f"pull of key {key} without a preceding push")
        self._pushed.discard(key)
        buf, buf_tag = self.comm_buf[key], self.comm_buf_tag[key]
        dst = out.value
        if self.mode in ("funnel", "concom"):
            self.engine.push(lambda: T.copy(buf, dst), reads=[buf_tag], mutates=[out.tag],
                             kind="copy", key=key)
            return
        transport, rank = self.transport, self.rank

        def allreduce_and_copy() -> None:
            transport.allreduce_sum(transport.world, rank, buf, key=key)
            T.copy(buf, dst)

        mutates = [out.tag, self.dummy_tag] if self.mode == "depcha" else [out.tag]
        self.engine.push(allreduce_and_copy, reads=[buf_tag], mutates=mutates, kind="comm", key=key)

    def barrier(self) -> None:
        """concom: wait for in-flight allreduces to drain, then world barrier. No-op otherwise."""
        if self.mode != "concom":
            return
        with self._outstanding_cv:
            # bodies skipped by a poisoned engine never decrement; poll for that
            while self._outstanding > 0:
                if self.engine.failure is not None:
                    raise self.engine.failure
                self._outstanding_cv.wait(0.05)
        self.transport.barrier(self.transport.world, self.rank)
        self._since_barrier = 0

    def end_iteration(self) -> None:
        """Flush a partially filled concom window."""
        if self.mode == "concom" and self._since_barrier:
            self.barrier()


def create(engine: Engine, transport: Transport, rank: int, config: KVStoreConfig,
           communicators: Sequence[int] = ()) -> KVStore:
    return KVStore.create(engine, transport, rank, config, communicators)
