"""Dependency-tracking asynchronous execution engine.

Every schedulable object is named by a :class:`Tag`. Each tag owns a FIFO of
dependency requests. Pushing an operation appends one request per listed tag;
a tag grants its head write exclusively, or the maximal run of reads at its
head collectively. An operation runs on the worker pool once every one of its
requests has been granted, and on completion it leaves all of its queues so
that the requests behind it can be re-examined.

Only one control thread may call :meth:`Engine.push`, :meth:`Engine.wait_for`
and :meth:`Engine.wait_all`. Bodies run on pool threads and may block.
"""

from __future__ import annotations

import itertools
import logging
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional

from .trace import TraceSink

log = logging.getLogger(__name__)

_engine_ids = itertools.count()


class EngineShutdown(RuntimeError):
    pass


@dataclass(frozen=True)
class Tag:
    id: int
    engine_id: int


@dataclass(eq=False)
class Operation:
    id: int
    body: Callable[[], object]
    reads: tuple[Tag, ...]
    mutates: tuple[Tag, ...]
    pending: int
    kind: Optional[str] = None
    key: Optional[int] = None


@dataclass(eq=False)
class _Request:
    op: Operation
    write: bool


@dataclass
class _VarQueue:
    requests: list[_Request] = field(default_factory=list)
    # granted requests always form a prefix of ``requests``
    granted: int = 0
    pending_writes: int = 0


class Engine:
    def __init__(
        self,
        num_worker_threads: int,
        *,
        trace: Optional[TraceSink] = None,
        rank: int = 0,
        name: str = "engine",
    ) -> None:
        if num_worker_threads < 1:
            raise ValueError(f"num_worker_threads must be >= 1, got {num_worker_threads}")
        self.num_worker_threads = num_worker_threads
        self.rank = rank
        self._id = next(_engine_ids)
        self._trace = trace
        self._pool = ThreadPoolExecutor(max_workers=num_worker_threads, thread_name_prefix=name)
        self._cv = threading.Condition()
        self._vars: dict[Tag, _VarQueue] = {}
        self._tag_ids = itertools.count()
        self._op_ids = itertools.count()
        self._outstanding = 0
        self._failure: Optional[BaseException] = None
        self._closed = False

    # -- tags ---------------------------------------------------------------

    def new_variable(self) -> Tag:
        tag = Tag(next(self._tag_ids), self._id)
        with self._cv:
            self._vars[tag] = _VarQueue()
        return tag

    # -- scheduling -----------------------------------------------------------

    def push(
        self,
        body: Callable[[], object],
        reads: Iterable[Tag] = (),
        mutates: Iterable[Tag] = (),
        *,
        kind: Optional[str] = None,
        key: Optional[int] = None,
    ) -> int:
        """Enqueue ``body``; returns the op id. Never blocks on dependencies."""
        reads = tuple(dict.fromkeys(reads))
        mutates = tuple(dict.fromkeys(mutates))
        overlap = set(reads) & set(mutates)
        if overlap:
            raise ValueError(f"tags both read and mutated: {sorted(t.id for t in overlap)}")
        ready: list[Operation] = []
        with self._cv:
            if self._closed:
                raise EngineShutdown("push after shutdown")
            for tag in reads + mutates:
                if tag not in self._vars:
                    raise KeyError(f"tag {tag} does not belong to this engine")
            op = Operation(next(self._op_ids), body, reads, mutates,
                           pending=len(reads) + len(mutates), kind=kind, key=key)
            self._outstanding += 1
            self._emit("op_pushed", op)
            for tag in reads:
                self._vars[tag].requests.append(_Request(op, write=False))
            for tag in mutates:
                q = self._vars[tag]
                q.requests.append(_Request(op, write=True))
                q.pending_writes += 1
            if op.pending == 0:
                ready.append(op)
            for tag in reads + mutates:
                ready.extend(self._grant(self._vars[tag]))
        self._submit(ready)
        return op.id

    def _grant(self, q: _VarQueue) -> list[Operation]:
        reqs = q.requests
        if not reqs:
            return []
        if q.granted and reqs[0].write:
            return []
        ready = []
        i = q.granted
        if i == 0 and reqs[0].write:
            stop = 1
        else:
            stop = i
            while stop < len(reqs) and not reqs[stop].write:
                stop += 1
        for req in reqs[i:stop]:
            req.op.pending -= 1
            if req.op.pending == 0:
                ready.append(req.op)
        q.granted = stop
        return ready

    def _run(self, op: Operation) -> None:
        with self._cv:
            skip = self._failure is not None
        if not skip:
            self._emit("op_started", op)
            try:
                op.body()
            except BaseException as exc:  # noqa: BLE001 - recorded, re-raised by wait_*
                with self._cv:
                    if self._failure is None:
                        self._failure = exc
                        log.debug("engine %d rank %d poisoned by op %d: %r", self._id, self.rank, op.id, exc)
            self._emit("op_finished", op)
        self._complete(op)

    def _complete(self, op: Operation) -> None:
        ready: list[Operation] = []
        with self._cv:
            for tag, write in [(t, False) for t in op.reads] + [(t, True) for t in op.mutates]:
                q = self._vars[tag]
                for idx, req in enumerate(q.requests):
                    if req.op is op:
                        del q.requests[idx]
                        break
                else:  # pragma: no cover - invariant
                    raise AssertionError("completed op missing from its queue")
                q.granted -= 1
                if write:
                    q.pending_writes -= 1
                ready.extend(self._grant(q))
            self._outstanding -= 1
            self._cv.notify_all()
        self._submit(ready)

    def _submit(self, ops: list[Operation]) -> None:
        for op in ops:
            try:
                self._pool.submit(self._run, op)
            except RuntimeError:
                # pool already shut down: only reachable after a failure, drain without running
                with self._cv:
                    if self._failure is None:
                        self._failure = EngineShutdown("op became ready after shutdown")
                self._complete(op)

    def _emit(self, event: str, op: Operation) -> None:
        if self._trace is not None:
            self._trace.emit(self.rank, event, op=op.id, key=op.key, kind=op.kind)

    # -- synchronization ------------------------------------------------------

    @property
    def failure(self) -> Optional[BaseException]:
        return self._failure

    def _raise_failure(self) -> None:
        if self._failure is not None:
            raise self._failure

    def wait_for(self, tag: Tag) -> None:
        """Block until every op pushed so far that mutates ``tag`` has finished."""
        with self._cv:
            if tag not in self._vars:
                raise KeyError(f"tag {tag} does not belong to this engine")
            q = self._vars[tag]
            self._cv.wait_for(lambda: q.pending_writes == 0 or self._failure is not None)
            self._raise_failure()

    def wait_all(self) -> None:
        with self._cv:
            self._cv.wait_for(lambda: self._outstanding == 0)
            self._raise_failure()

    def shutdown(self) -> None:
        with self._cv:
            if self._closed:
                return
            self._closed = True
        self._pool.shutdown(wait=True)

    def __enter__(self) -> "Engine":
        return self

    def __exit__(self, *exc) -> None:
        self.shutdown()


def new_engine(num_worker_threads: int, **kwargs) -> Engine:
    return Engine(num_worker_threads, **kwargs)
