"""Thread-safe trace sink plus the timeline queries used by tests and metrics.

Every record carries the same field set::

    t_us   microseconds since the sink was created
    rank   worker rank that emitted the record
    event  op_pushed | op_started | op_finished |
           coll_enqueued | coll_matched | coll_done
    op     engine op id (op_* events), else null
    key    kvstore key when known, else null
    comm   communicator id (coll_* events), else null
    seq    per-communicator sequence index (coll_* events), else null
    kind   op category (compute, update, copy, comm, init) or collective kind
           (allreduce, broadcast, barrier)
"""

from __future__ import annotations

import json
import threading
import time
from collections import defaultdict
from typing import Iterable, Optional

FIELDS = ("t_us", "rank", "event", "op", "key", "comm", "seq", "kind")

OP_EVENTS = ("op_pushed", "op_started", "op_finished")
COLL_EVENTS = ("coll_enqueued", "coll_matched", "coll_done")

WORLD = 0


class TraceSink:
    def __init__(self) -> None:
        self._lock = threading.Lock()
        self._t0 = time.perf_counter_ns()
        self._events: list[dict] = []

    def emit(
        self,
        rank: int,
        event: str,
        *,
        op: Optional[int] = None,
        key: Optional[int] = None,
        comm: Optional[int] = None,
        seq: Optional[int] = None,
        kind: Optional[str] = None,
    ) -> None:
        with self._lock:
            # stamp under the lock so emission order and time order agree
            t_us = (time.perf_counter_ns() - self._t0) // 1000
            self._events.append(
                {"t_us": t_us, "rank": rank, "event": event, "op": op,
                 "key": key, "comm": comm, "seq": seq, "kind": kind}
            )

    def events(self) -> list[dict]:
        with self._lock:
            return list(self._events)

    def write_jsonl(self, path: str) -> None:
        with open(path, "w") as fh:
            for ev in self.events():
                fh.write(json.dumps(ev) + "\n")


def read_jsonl(path: str) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def _by_rank(events: Iterable[dict]) -> dict[int, list[dict]]:
    out: dict[int, list[dict]] = defaultdict(list)
    for ev in events:
        out[ev["rank"]].append(ev)
    return out


def collective_intervals(events: Iterable[dict]) -> dict[int, list[tuple[int, int, dict]]]:
    """Per rank, ``(start_us, end_us, enqueue_record)`` for each finished collective."""
    out: dict[int, list[tuple[int, int, dict]]] = defaultdict(list)
    for rank, evs in _by_rank(events).items():
        open_calls: dict[tuple[int, int], dict] = {}
        for ev in evs:
            if ev["event"] == "coll_enqueued":
                open_calls[(ev["comm"], ev["seq"])] = ev
            elif ev["event"] == "coll_done":
                start = open_calls.pop((ev["comm"], ev["seq"]), None)
                if start is not None:
                    out[rank].append((start["t_us"], ev["t_us"], start))
    return out


def op_intervals(events: Iterable[dict], kinds: Iterable[str] = ("compute",)) -> dict[int, list[tuple[int, int, dict]]]:
    wanted = set(kinds)
    out: dict[int, list[tuple[int, int, dict]]] = defaultdict(list)
    for rank, evs in _by_rank(events).items():
        started: dict[int, dict] = {}
        for ev in evs:
            if ev["event"] == "op_started" and ev["kind"] in wanted:
                started[ev["op"]] = ev
            elif ev["event"] == "op_finished" and ev["op"] in started:
                start = started.pop(ev["op"])
                out[rank].append((start["t_us"], ev["t_us"], start))
    return out


def _max_overlap(intervals: list[tuple[int, int, dict]]) -> int:
    # end sorts before start at equal timestamps: touching intervals do not overlap
    points = []
    for start, end, _ in intervals:
        points.append((start, 1))
        points.append((end, -1))
    points.sort(key=lambda p: (p[0], p[1]))
    best = cur = 0
    for _, delta in points:
        cur += delta
        best = max(best, cur)
    return best


def max_concurrent_collectives(events: Iterable[dict]) -> int:
    """Largest number of collectives one rank had in flight at the same instant."""
    per_rank = collective_intervals(events)
    return max((_max_overlap(iv) for iv in per_rank.values()), default=0)


def compute_comm_overlaps(events: Iterable[dict], kinds: Iterable[str] = ("compute", "update")) -> int:
    """Count ops of the given kinds that ran strictly inside some in-flight collective window."""
    events = list(events)
    colls = collective_intervals(events)
    ops = op_intervals(events, kinds)
    count = 0
    for rank, op_iv in ops.items():
        c_iv = colls.get(rank, [])
        for s, e, _ in op_iv:
            if any(s < ce and cs < e for cs, ce, _ in c_iv):
                count += 1
    return count


def call_sequence(events: Iterable[dict], rank: int, comm: int = WORLD) -> list[tuple[str, Optional[int]]]:
    """``(kind, key)`` of every collective ``rank`` issued on ``comm``, in sequence order."""
    calls = [ev for ev in events
             if ev["event"] == "coll_enqueued" and ev["rank"] == rank and ev["comm"] == comm]
    calls.sort(key=lambda ev: ev["seq"])
    return [(ev["kind"], ev["key"]) for ev in calls]


def check_replay(events: Iterable[dict], num_ranks: int) -> list[str]:
    """Return a list of consistency violations; empty means the trace replays cleanly."""
    problems: list[str] = []
    pushed: set[tuple[int, int]] = set()
    matched: set[tuple[int, int, int]] = set()
    enqueued: dict[tuple[int, int], int] = defaultdict(int)
    last_t: dict[int, int] = {}
    for ev in events:
        if set(ev) != set(FIELDS):
            problems.append(f"bad field set: {sorted(ev)}")
            continue
        rank = ev["rank"]
        if ev["t_us"] < last_t.get(rank, 0):
            problems.append(f"time went backwards for rank {rank} at {ev}")
        last_t[rank] = ev["t_us"]
        kind = ev["event"]
        if kind == "op_pushed":
            pushed.add((rank, ev["op"]))
        elif kind == "op_started" and (rank, ev["op"]) not in pushed:
            problems.append(f"op_started without op_pushed: {ev}")
        elif kind == "coll_enqueued":
            enqueued[(ev["comm"], ev["seq"])] += 1
        elif kind == "coll_matched":
            matched.add((rank, ev["comm"], ev["seq"]))
        elif kind == "coll_done" and (rank, ev["comm"], ev["seq"]) not in matched:
            problems.append(f"coll_done without coll_matched: {ev}")
    for (comm, seq), n in sorted(enqueued.items()):
        if n != num_ranks:
            problems.append(f"comm {comm} seq {seq}: {n} coll_enqueued, expected {num_ranks}")
    return problems
