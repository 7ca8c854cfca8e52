"""In-process transport with MPI-style collective matching.

Every communicator keeps an independent sequence counter per rank. The k-th
call a rank makes on a communicator is matched with every other rank's k-th
call on that communicator, and only with it. A matched index whose calls
disagree on kind, element count or root raises :class:`MismatchError`; an
index that is not complete before the watchdog expires raises
:class:`DeadlockTimeout`. Either error aborts the whole transport, waking
every blocked caller, much as ``MPI_Abort`` would.

Reduction is gather-then-sum in rank order, performed by the last rank to
arrive, so results are bit-identical on all ranks and independent of arrival
order.
"""

from __future__ import annotations

import threading
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .tensor import Tensor
from .trace import WORLD, TraceSink

ALLREDUCE = "allreduce"
BROADCAST = "broadcast"
BARRIER = "barrier"

DEFAULT_WATCHDOG = 5.0


class CollectiveError(RuntimeError):
    pass


class UsageError(CollectiveError):
    pass


class MismatchError(CollectiveError):
    def __init__(self, comm: int, seq: int, calls: dict[int, "CollectiveCall"]) -> None:
        self.comm = comm
        self.seq = seq
        self.calls = dict(calls)
        desc = ", ".join(f"rank {r}: {c}" for r, c in sorted(calls.items()))
        super().__init__(f"mismatched collectives on comm {comm} seq {seq}: {desc}")


class DeadlockTimeout(CollectiveError):
    def __init__(self, comm: int, seq: int, waited: float, report: dict[int, str]) -> None:
        self.comm = comm
        self.seq = seq
        self.waited = waited
        self.report = dict(report)
        desc = "; ".join(f"rank {r}: {s}" for r, s in sorted(report.items()))
        super().__init__(f"comm {comm} seq {seq} incomplete after {waited:.3f}s: {desc}")


class TransportAborted(CollectiveError):
    """Raised in callers that were not party to the failure that aborted the transport."""

    def __init__(self, cause: CollectiveError) -> None:
        self.cause = cause
        super().__init__(f"transport aborted: {cause}")


@dataclass(frozen=True)
class CollectiveCall:
    kind: str
    count: int
    root: Optional[int] = None

    def __str__(self) -> str:
        extra = f", root={self.root}" if self.root is not None else ""
        return f"{self.kind}(count={self.count}{extra})"


@dataclass(eq=False)
class _Slot:
    calls: dict[int, CollectiveCall] = field(default_factory=dict)
    buffers: dict[int, Optional[Tensor]] = field(default_factory=dict)
    done: bool = False
    departed: int = 0


@dataclass(eq=False)
class Communicator:
    comm_id: int
    num_ranks: int
    next_seq: list[int] = field(init=False)
    inflight: list[int] = field(init=False)
    slots: dict[int, _Slot] = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.next_seq = [0] * self.num_ranks
        self.inflight = [0] * self.num_ranks


class Transport:
    """``num_ranks`` simulated processes sharing one address space.

    ``strict`` turns a second concurrent call on the same (rank, communicator)
    into :class:`UsageError`. It is off by default so that unordered
    multi-threaded issue surfaces the way it would under real MPI: as a
    mismatch or a hang at some sequence index.
    """

    def __init__(
        self,
        num_ranks: int,
        watchdog: float = DEFAULT_WATCHDOG,
        *,
        trace: Optional[TraceSink] = None,
        latency: float = 0.0,
        strict: bool = False,
    ) -> None:
        if num_ranks < 1:
            raise ValueError(f"num_ranks must be >= 1, got {num_ranks}")
        if not watchdog > 0:
            raise ValueError(f"watchdog must be positive, got {watchdog}")
        if latency < 0:
            raise ValueError("latency must be >= 0")
        self.num_ranks = num_ranks
        self.watchdog = float(watchdog)
        self.latency = float(latency)
        self.strict = strict
        self._trace = trace
        self._cv = threading.Condition()
        self._comms: dict[int, Communicator] = {WORLD: Communicator(WORLD, num_ranks)}
        self._sealed = False
        self._error: Optional[CollectiveError] = None

    @property
    def world(self) -> int:
        return WORLD

    @property
    def error(self) -> Optional[CollectiveError]:
        return self._error

    def communicators(self) -> list[int]:
        return sorted(self._comms)

    def new_communicator(self) -> int:
        with self._cv:
            if self._sealed:
                raise UsageError("communicators must be created before workers start")
            comm_id = len(self._comms)
            self._comms[comm_id] = Communicator(comm_id, self.num_ranks)
            return comm_id

    def seal(self) -> None:
        """Mark setup finished; no further communicators may be created."""
        with self._cv:
            self._sealed = True

    # -- public collectives ---------------------------------------------------

    def allreduce_sum(self, comm_id: int, rank: int, buffer: Tensor, *, key: Optional[int] = None) -> None:
        if buffer.size == 0:
            raise ValueError("allreduce buffer must be non-empty")
        self._collective(comm_id, rank, CollectiveCall(ALLREDUCE, buffer.size), buffer, key)

    def broadcast(self, comm_id: int, rank: int, root: int, buffer: Tensor, *, key: Optional[int] = None) -> None:
        self._check_rank(root)
        self._collective(comm_id, rank, CollectiveCall(BROADCAST, buffer.size, root), buffer, key)

    def barrier(self, comm_id: int, rank: int) -> None:
        self._collective(comm_id, rank, CollectiveCall(BARRIER, 0), None, None)

    # -- matching ---------------------------------------------------------------

    def _check_rank(self, rank: int) -> None:
        if not 0 <= rank < self.num_ranks:
            raise ValueError(f"rank {rank} out of range for {self.num_ranks} ranks")

    def _emit(self, rank: int, event: str, comm: int, seq: int, call: CollectiveCall, key: Optional[int]) -> None:
        if self._trace is not None:
            self._trace.emit(rank, event, comm=comm, seq=seq, kind=call.kind, key=key)

    def _abort(self, err: CollectiveError) -> None:
        if self._error is None:
            self._error = err
        self._cv.notify_all()

    def _raise_if_aborted(self) -> None:
        if self._error is not None:
            raise TransportAborted(self._error)

    def _collective(
        self,
        comm_id: int,
        rank: int,
        call: CollectiveCall,
        buffer: Optional[Tensor],
        key: Optional[int],
    ) -> None:
        self._check_rank(rank)
        with self._cv:
            self._sealed = True
            self._raise_if_aborted()
            comm = self._comms.get(comm_id)
            if comm is None:
                raise UsageError(f"unknown communicator {comm_id}")
            if self.strict and comm.inflight[rank]:
                raise UsageError(f"rank {rank} already has a call in flight on comm {comm_id}")
            seq = comm.next_seq[rank]
            comm.next_seq[rank] += 1
            comm.inflight[rank] += 1
            self._emit(rank, "coll_enqueued", comm_id, seq, call, key)
            slot = comm.slots.setdefault(seq, _Slot())
            for other, other_call in slot.calls.items():
                if other_call != call:
                    err = MismatchError(comm_id, seq, {**slot.calls, rank: call})
                    comm.inflight[rank] -= 1
                    self._abort(err)
                    raise err
            slot.calls[rank] = call
            slot.buffers[rank] = buffer
            reducer = len(slot.calls) == self.num_ranks
            if reducer:
                for r in sorted(slot.calls):
                    self._emit(r, "coll_matched", comm_id, seq, call, key)

        try:
            if reducer:
                self._complete(comm, seq, slot, call)
            else:
                self._await(comm, seq, slot, rank, call)
        finally:
            with self._cv:
                comm.inflight[rank] -= 1
                slot.departed += 1
                if slot.departed == self.num_ranks:
                    comm.slots.pop(seq, None)
        self._emit(rank, "coll_done", comm_id, seq, call, key)

    def _complete(self, comm: Communicator, seq: int, slot: _Slot, call: CollectiveCall) -> None:
        if self.latency:
            time.sleep(self.latency)
        ranks = range(self.num_ranks)
        if call.kind == ALLREDUCE:
            total = slot.buffers[0].data.copy()
            for r in ranks[1:]:
                total += slot.buffers[r].data
            for r in ranks:
                np.copyto(slot.buffers[r].data, total.reshape(slot.buffers[r].shape))
        elif call.kind == BROADCAST:
            src = slot.buffers[call.root].data.ravel()
            for r in ranks:
                if r != call.root:
                    np.copyto(slot.buffers[r].data, src.reshape(slot.buffers[r].shape))
        with self._cv:
            slot.done = True
            self._cv.notify_all()

    def _await(self, comm: Communicator, seq: int, slot: _Slot, rank: int, call: CollectiveCall) -> None:
        start = time.monotonic()
        deadline = start + self.watchdog
        with self._cv:
            while not slot.done:
                if self._error is not None:
                    if isinstance(self._error, MismatchError) and self._error.comm == comm.comm_id \
                            and self._error.seq == seq:
                        raise MismatchError(comm.comm_id, seq, self._error.calls)
                    raise TransportAborted(self._error)
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    err = DeadlockTimeout(comm.comm_id, seq, time.monotonic() - start,
                                          self._deadlock_report(comm, seq, slot))
                    self._abort(err)
                    raise err
                self._cv.wait(remaining)

    def _deadlock_report(self, comm: Communicator, seq: int, slot: _Slot) -> dict[int, str]:
        report = {}
        for r in range(self.num_ranks):
            if r in slot.calls:
                report[r] = f"pending {slot.calls[r]}"
            else:
                report[r] = "no call issued"
        return report


def create_transport(num_ranks: int, watchdog: float = DEFAULT_WATCHDOG, **kwargs) -> Transport:
    return Transport(num_ranks, watchdog, **kwargs)
