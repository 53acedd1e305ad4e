"""Non-blocking request manager between agents and planner backends.

The manager is the only boundary between the single-threaded simulation loop
and planner execution. Submissions never block; completions are handed back
exclusively through :meth:`drain_completions`, which the loop calls once per
tick. Every submitted handle resolves exactly once: completed, timed out,
cancelled, or rejected at a full queue.

Two execution regimes share the same interface:

* :class:`RequestManager` (virtual time) — the backend result is computed at
  dispatch and its delivery is scheduled ``latency`` seconds of simulated time
  later, so experiments are bit-reproducible without any threads.
* :class:`WallClockRequestManager` — dispatches to a thread pool and drains
  whatever has physically arrived; used with live planner services.
"""

from __future__ import annotations

import queue
import threading
import time as _time
from collections import deque
from dataclasses import dataclass, field
from typing import Protocol

from .network import RoadGraph
from .planner import LatencyModel, PlanOutcome, PlanRequest, PlanResponse

DEFAULT_MAX_IN_FLIGHT = 4
DEFAULT_QUEUE_CAPACITY = 256
DEFAULT_TIMEOUT = 10.0

TIMEOUT_ERROR = "timeout"
QUEUE_FULL_ERROR = "queue_full"
CANCELLED_ERROR = "cancelled"


class PlannerBackend(Protocol):
    def plan(self, request: PlanRequest, graph: RoadGraph) -> PlanOutcome | None: ...


@dataclass(frozen=True)
class RequestHandle:
    request_id: int
    agent_id: int
    submitted_at: float
    deadline: float


@dataclass
class ManagerStats:
    submitted: int = 0
    completed: int = 0
    timed_out: int = 0
    cancelled: int = 0
    rejected: int = 0
    stale_dropped: int = 0
    cancel_noops: int = 0

    @property
    def resolved(self) -> int:
        return self.completed + self.timed_out + self.cancelled + self.rejected

    def as_dict(self) -> dict[str, int]:
        return {
            "submitted": self.submitted,
            "completed": self.completed,
            "timed_out": self.timed_out,
            "cancelled": self.cancelled,
            "rejected": self.rejected,
            "stale_dropped": self.stale_dropped,
            "cancel_noops": self.cancel_noops,
        }


_QUEUED = "queued"
_IN_FLIGHT = "in_flight"
_RESOLVED = "resolved"


@dataclass
class _Record:
    request: PlanRequest
    handle: RequestHandle
    state: str = _QUEUED
    dispatched_at: float | None = None
    ready_at: float | None = None  # None while queued or for never-finishing backends
    outcome: PlanOutcome | None = None
    delivery: PlanResponse | None = None  # set for pre-resolved failures awaiting delivery


class RequestManager:
    """Virtual-time manager: completions are scheduled simulation events."""

    def __init__(
        self,
        backend: PlannerBackend,
        graph: RoadGraph,
        latency: LatencyModel,
        *,
        max_in_flight: int = DEFAULT_MAX_IN_FLIGHT,
        queue_capacity: int = DEFAULT_QUEUE_CAPACITY,
        timeout: float = DEFAULT_TIMEOUT,
    ):
        if max_in_flight < 1:
            raise ValueError("max_in_flight must be >= 1")
        if timeout <= 0:
            raise ValueError("timeout must be positive")
        self.backend = backend
        self.graph = graph
        self.latency = latency
        self.max_in_flight = max_in_flight
        self.queue_capacity = queue_capacity
        self.timeout = timeout
        self.stats = ManagerStats()
        self._records: dict[int, _Record] = {}
        self._queue: deque[int] = deque()
        self._in_flight: set[int] = set()
        self._pending_delivery: list[int] = []
        self._dispatch_count = 0

    # -- public API ---------------------------------------------------------

    def submit(self, request: PlanRequest) -> RequestHandle:
        """Enqueue a request; returns immediately.

        A full queue resolves the handle as a failure (delivered on the next
        drain) instead of blocking or raising, so the caller's fallback path
        is the same as for any other planner failure.
        """
        if request.request_id in self._records:
            raise ValueError(f"duplicate request id {request.request_id}")
        now = request.issued_at
        handle = RequestHandle(request.request_id, request.agent_id, now, now + self.timeout)
        record = _Record(request, handle)
        self._records[request.request_id] = record
        self.stats.submitted += 1
        if len(self._queue) >= self.queue_capacity:
            record.state = _RESOLVED
            record.delivery = PlanResponse(
                request.request_id, request.agent_id, None, QUEUE_FULL_ERROR, 0.0
            )
            self.stats.rejected += 1
            self._pending_delivery.append(request.request_id)
            return handle
        self._queue.append(request.request_id)
        self._dispatch_available(now)
        return handle

    def drain_completions(self, now: float) -> dict[int, list[PlanResponse]]:
        """Collect every response that became ready by ``now``, keyed by agent.

        Expired handles resolve as timeout failures through the same path, and
        freed in-flight slots immediately pull queued requests forward.
        """
        delivered: dict[int, list[PlanResponse]] = {}

        for rid in self._pending_delivery:
            record = self._records[rid]
            if record.delivery is not None:
                delivered.setdefault(record.handle.agent_id, []).append(record.delivery)
                record.delivery = None
        self._pending_delivery.clear()

        while True:
            due: list[tuple[float, int]] = []
            for rid in list(self._in_flight):
                record = self._records[rid]
                ready = record.ready_at if record.ready_at is not None else float("inf")
                event_time = min(ready, record.handle.deadline)
                if event_time <= now:
                    due.append((event_time, rid))
            for rid in list(self._queue):
                record = self._records[rid]
                if record.handle.deadline <= now:
                    due.append((record.handle.deadline, rid))
            if not due:
                break
            due.sort()
            for _event_time, rid in due:
                record = self._records[rid]
                if record.state == _QUEUED:
                    self._queue.remove(rid)
                    response = self._timeout_response(record)
                else:
                    self._in_flight.discard(rid)
                    ready = record.ready_at if record.ready_at is not None else float("inf")
                    if ready <= record.handle.deadline and ready <= now:
                        outcome = record.outcome
                        assert outcome is not None
                        response = PlanResponse(
                            rid,
                            record.handle.agent_id,
                            outcome.path,
                            outcome.error,
                            ready - (record.dispatched_at or record.handle.submitted_at),
                        )
                        self.stats.completed += 1
                    else:
                        response = self._timeout_response(record)
                record.state = _RESOLVED
                delivered.setdefault(record.handle.agent_id, []).append(response)
            self._dispatch_available(now)
        return delivered

    def cancel(self, handle: RequestHandle) -> None:
        """Resolve a handle as cancelled; late results are dropped, never
        delivered. Cancelling a resolved handle is a counted no-op."""
        record = self._records.get(handle.request_id)
        if record is None or record.state == _RESOLVED:
            self.stats.cancel_noops += 1
            return
        if record.state == _QUEUED:
            self._queue.remove(handle.request_id)
        else:
            self._in_flight.discard(handle.request_id)
            if record.outcome is not None or record.ready_at is not None:
                self.stats.stale_dropped += 1
        record.state = _RESOLVED
        record.outcome = None
        record.delivery = None
        self.stats.cancelled += 1

    def cancel_all(self) -> None:
        for record in list(self._records.values()):
            if record.state != _RESOLVED:
                self.cancel(record.handle)

    @property
    def queued_count(self) -> int:
        return len(self._queue)

    @property
    def in_flight_count(self) -> int:
        return len(self._in_flight)

    @property
    def unresolved_count(self) -> int:
        return len(self._queue) + len(self._in_flight)

    # -- internals ----------------------------------------------------------

    def _timeout_response(self, record: _Record) -> PlanResponse:
        self.stats.timed_out += 1
        return PlanResponse(
            record.request.request_id,
            record.handle.agent_id,
            None,
            TIMEOUT_ERROR,
            self.timeout,
        )

    def _dispatch_available(self, now: float) -> None:
        while self._queue and len(self._in_flight) < self.max_in_flight:
            rid = self._queue.popleft()
            record = self._records[rid]
            record.state = _IN_FLIGHT
            record.dispatched_at = now
            outcome = self.backend.plan(record.request, self.graph)
            if outcome is None:
                record.ready_at = None  # never completes; resolved by timeout
            else:
                record.outcome = outcome
                record.ready_at = now + self.latency.sample(self._dispatch_count)
            self._dispatch_count += 1
            self._in_flight.add(rid)


class WallClockRequestManager:
    """Same contract, but the backend really runs on worker threads.

    Completions land in a thread-safe mailbox and are surfaced only inside
    :meth:`drain_completions` on the caller's thread; ``submit`` and ``drain``
    never wait on the backend.
    """

    def __init__(
        self,
        backend: PlannerBackend,
        graph: RoadGraph,
        *,
        max_in_flight: int = DEFAULT_MAX_IN_FLIGHT,
        queue_capacity: int = DEFAULT_QUEUE_CAPACITY,
        timeout: float = DEFAULT_TIMEOUT,
    ):
        self.backend = backend
        self.graph = graph
        self.max_in_flight = max_in_flight
        self.queue_capacity = queue_capacity
        self.timeout = timeout
        self.stats = ManagerStats()
        self._records: dict[int, _Record] = {}
        self._queue: deque[int] = deque()
        self._in_flight: set[int] = set()
        self._pending_delivery: list[int] = []
        self._mailbox: queue.SimpleQueue[tuple[int, PlanOutcome, float]] = queue.SimpleQueue()
        self._lock = threading.Lock()

    def submit(self, request: PlanRequest) -> RequestHandle:
        now = request.issued_at
        handle = RequestHandle(request.request_id, request.agent_id, now, now + self.timeout)
        record = _Record(request, handle)
        with self._lock:
            self._records[request.request_id] = record
            self.stats.submitted += 1
            if len(self._queue) >= self.queue_capacity:
                record.state = _RESOLVED
                record.delivery = PlanResponse(
                    request.request_id, request.agent_id, None, QUEUE_FULL_ERROR, 0.0
                )
                self.stats.rejected += 1
                self._pending_delivery.append(request.request_id)
                return handle
            self._queue.append(request.request_id)
            self._dispatch_available()
        return handle

    def _dispatch_available(self) -> None:
        # caller holds the lock
        while self._queue and len(self._in_flight) < self.max_in_flight:
            rid = self._queue.popleft()
            record = self._records[rid]
            record.state = _IN_FLIGHT
            self._in_flight.add(rid)
            thread = threading.Thread(
                target=self._worker, args=(record.request,), daemon=True
            )
            thread.start()

    def _worker(self, request: PlanRequest) -> None:
        started = _time.monotonic()
        try:
            outcome = self.backend.plan(request, self.graph)
        except Exception as exc:
            outcome = PlanOutcome.fail(f"backend_error: {exc}")
        if outcome is None:
            return  # never completes; the deadline will resolve it
        self._mailbox.put((request.request_id, outcome, _time.monotonic() - started))

    def drain_completions(self, now: float) -> dict[int, list[PlanResponse]]:
        delivered: dict[int, list[PlanResponse]] = {}
        with self._lock:
            for rid in self._pending_delivery:
                record = self._records[rid]
                if record.delivery is not None:
                    delivered.setdefault(record.handle.agent_id, []).append(record.delivery)
                    record.delivery = None
            self._pending_delivery.clear()

            arrivals: list[tuple[int, PlanOutcome, float]] = []
            while True:
                try:
                    arrivals.append(self._mailbox.get_nowait())
                except queue.Empty:
                    break
            for rid, outcome, latency in arrivals:
                record = self._records.get(rid)
                if record is None or record.state == _RESOLVED:
                    self.stats.stale_dropped += 1
                    continue
                self._in_flight.discard(rid)
                record.state = _RESOLVED
                self.stats.completed += 1
                delivered.setdefault(record.handle.agent_id, []).append(
                    PlanResponse(rid, record.handle.agent_id, outcome.path, outcome.error, latency)
                )

            for rid in list(self._in_flight) + list(self._queue):
                record = self._records[rid]
                if record.handle.deadline <= now:
                    if record.state == _QUEUED:
                        self._queue.remove(rid)
                    else:
                        self._in_flight.discard(rid)
                    record.state = _RESOLVED
                    self.stats.timed_out += 1
                    delivered.setdefault(record.handle.agent_id, []).append(
                        PlanResponse(rid, record.handle.agent_id, None, TIMEOUT_ERROR, self.timeout)
                    )
            self._dispatch_available()
        return delivered

    def cancel(self, handle: RequestHandle) -> None:
        with self._lock:
            record = self._records.get(handle.request_id)
            if record is None or record.state == _RESOLVED:
                self.stats.cancel_noops += 1
                return
            if record.state == _QUEUED:
                self._queue.remove(handle.request_id)
            else:
                self._in_flight.discard(handle.request_id)
            record.state = _RESOLVED
            self.stats.cancelled += 1

    def cancel_all(self) -> None:
        with self._lock:
            unresolved = [r.handle for r in self._records.values() if r.state != _RESOLVED]
        for handle in unresolved:
            self.cancel(handle)

    @property
    def queued_count(self) -> int:
        return len(self._queue)

    @property
    def in_flight_count(self) -> int:
        return len(self._in_flight)

    @property
    def unresolved_count(self) -> int:
        return len(self._queue) + len(self._in_flight)
