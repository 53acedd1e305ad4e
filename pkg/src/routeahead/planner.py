"""Route-planning backends and their shared contract.

Three ways to answer "which way from here":

* :func:`plan_static` — shortest physical distance, ignores traffic.
* :func:`plan_congestion_aware` — minimizes distance scaled by each edge's
  congestion factor, the deterministic stand-in for a reasoning model. Paired
  with a :class:`LatencyModel` it reproduces the timing behavior of a slow
  planner without any nondeterminism.
* :class:`TextBackend` — adapts any text-producing planner (e.g. a hosted
  language model) by parsing a JSON node array out of its reply.

Prompt construction and reply parsing live here too, so every backend speaks
the same wire format.
"""

from __future__ import annotations

import hashlib
import json
import random
from dataclasses import dataclass
from typing import Callable

from .congestion import CongestionSnapshot, snapshot_to_json
from .network import Path, RoadGraph, Unreachable, min_cost_path


@dataclass(frozen=True)
class PlanRequest:
    """One asynchronous planning job issued by an agent."""

    request_id: int
    agent_id: int
    origin: int
    destination: int
    snapshot: CongestionSnapshot
    issued_at: float


@dataclass(frozen=True)
class PlanResponse:
    request_id: int
    agent_id: int
    path: tuple[int, ...] | None
    error: str | None
    latency: float

    @property
    def success(self) -> bool:
        return self.path is not None


@dataclass(frozen=True)
class PlanOutcome:
    """Backend result before delivery bookkeeping (no ids, no latency)."""

    path: tuple[int, ...] | None
    error: str | None = None

    @classmethod
    def ok(cls, path) -> "PlanOutcome":
        return cls(tuple(path))

    @classmethod
    def fail(cls, error: str) -> "PlanOutcome":
        return cls(None, error)


# --------------------------------------------------------------------------
# Planners


def plan_static(graph: RoadGraph, origin: int, destination: int) -> Path:
    """Minimum physical-length route; zero-latency local computation."""
    return min_cost_path(graph, origin, destination)


def plan_congestion_aware(
    graph: RoadGraph, snapshot: CongestionSnapshot, origin: int, destination: int
) -> Path:
    """Minimize total length x congestion factor over the reported state.

    Edges absent from the snapshot count as free-flowing (CF = 1.0), so with
    an empty snapshot this coincides exactly with :func:`plan_static`.
    """
    factors = {(u, v): cf for u, v, cf in snapshot.entries}
    if not factors:
        return min_cost_path(graph, origin, destination)

    def cost(edge) -> float:
        return edge.length * factors.get((edge.u, edge.v), 1.0)

    return min_cost_path(graph, origin, destination, edge_cost=cost)


# --------------------------------------------------------------------------
# Latency models


class LatencyModel:
    """Deterministic latency source: same (seed, draw index) => same sample."""

    def sample(self, draw_index: int) -> float:
        raise NotImplementedError

    @staticmethod
    def _rng(seed: int, draw_index: int) -> random.Random:
        digest = hashlib.sha256(f"{seed}:{draw_index}".encode()).digest()
        return random.Random(int.from_bytes(digest[:8], "big"))


@dataclass(frozen=True)
class FixedLatency(LatencyModel):
    value: float

    def __post_init__(self):
        if self.value < 0:
            raise ValueError(f"latency must be >= 0, got {self.value}")

    def sample(self, draw_index: int) -> float:
        return self.value


@dataclass(frozen=True)
class UniformLatency(LatencyModel):
    low: float
    high: float
    seed: int = 0

    def __post_init__(self):
        if not (0 <= self.low <= self.high):
            raise ValueError(f"need 0 <= low <= high, got [{self.low}, {self.high}]")

    def sample(self, draw_index: int) -> float:
        return self._rng(self.seed, draw_index).uniform(self.low, self.high)


@dataclass(frozen=True)
class LogNormalLatency(LatencyModel):
    mu: float
    sigma: float
    seed: int = 0

    def __post_init__(self):
        if self.sigma < 0:
            raise ValueError(f"sigma must be >= 0, got {self.sigma}")

    def sample(self, draw_index: int) -> float:
        return self._rng(self.seed, draw_index).lognormvariate(self.mu, self.sigma)


def sample_latency(model: LatencyModel, draw_index: int) -> float:
    return model.sample(draw_index)


# --------------------------------------------------------------------------
# Prompting and reply parsing

NO_CONGESTION_LINE = "No congested roads."


def build_prompt(
    graph: RoadGraph, snapshot: CongestionSnapshot, origin: int, destination: int
) -> str:
    """Assemble the three-section navigation prompt.

    Byte-for-byte deterministic for identical inputs: a road-network section
    (nodes, coordinates, adjacency with lengths), the live congestion report,
    and the task statement with the required answer format.
    """
    lines = ["Road network:"]
    for node in graph.nodes:
        links = ", ".join(
            f"{nbr} ({graph.edges[eidx].length:.1f} m)"
            for nbr, eidx in graph.adjacency[node.id]
        )
        lines.append(f"  node {node.id} at ({node.x:.0f}, {node.y:.0f}) connects to: {links}")
    lines.append("")
    lines.append("Congested roads as [from_node, to_node, congestion_factor]:")
    if snapshot.entries:
        lines.append(snapshot_to_json(snapshot))
    else:
        lines.append(NO_CONGESTION_LINE)
    lines.append("")
    lines.append("Task:")
    lines.append(f"You are at node {origin}. Your destination is node {destination}.")
    lines.append(
        "Choose a route that balances distance against the reported congestion. "
        "Answer with only a JSON array of node ids from your current node to the "
        "destination, for example [0, 4, 8]."
    )
    return "\n".join(lines)


class PathParseError(ValueError):
    """Reply could not be turned into a node sequence; ``code`` says why."""

    def __init__(self, code: str, message: str):
        super().__init__(message)
        self.code = code


def parse_path_from_text(text: str) -> Path:
    """Extract the answer array from a planner reply.

    Takes the last top-level JSON array in the text (replies may carry
    reasoning before the answer) and requires every element to be a
    non-negative integer. Graph-level validation is the caller's job.
    """
    decoder = json.JSONDecoder()
    arrays = []
    i = 0
    n = len(text)
    while i < n:
        if text[i] == "[":
            try:
                value, end = decoder.raw_decode(text, i)
            except ValueError:
                i += 1
                continue
            if isinstance(value, list):
                arrays.append(value)
                i = end
                continue
        i += 1
    if not arrays:
        raise PathParseError("no_array_found", "reply contains no JSON array")
    candidate = arrays[-1]
    if not candidate:
        raise PathParseError("empty_array", "reply array is empty")
    for item in candidate:
        if isinstance(item, bool) or not isinstance(item, int) or item < 0:
            raise PathParseError(
                "non_integer_element",
                f"array element {item!r} is not a non-negative integer",
            )
    return list(candidate)


def render_path(path: Path) -> str:
    """Inverse of :func:`parse_path_from_text` for well-formed paths."""
    return json.dumps(list(path))


# --------------------------------------------------------------------------
# Backends (virtual-time; wall-clock execution is the request manager's job)


class OracleBackend:
    """Deterministic congestion-aware planner used for reproducible runs."""

    def plan(self, request: PlanRequest, graph: RoadGraph) -> PlanOutcome | None:
        try:
            path = plan_congestion_aware(
                graph, request.snapshot, request.origin, request.destination
            )
        except Unreachable as exc:
            return PlanOutcome.fail(f"unreachable: {exc}")
        return PlanOutcome.ok(path)


class StaticBackend:
    """Distance-only planner behind the same asynchronous contract."""

    def plan(self, request: PlanRequest, graph: RoadGraph) -> PlanOutcome | None:
        try:
            path = plan_static(graph, request.origin, request.destination)
        except Unreachable as exc:
            return PlanOutcome.fail(f"unreachable: {exc}")
        return PlanOutcome.ok(path)


class NeverRespondingBackend:
    """Adversarial backend that swallows every request (timeout-path tests)."""

    def plan(self, request: PlanRequest, graph: RoadGraph) -> PlanOutcome | None:
        return None


class TextBackend:
    """Adapter from a raw-text planner to the structured contract.

    ``reply_fn`` receives the request and the prompt and returns the planner's
    textual reply; malformed replies become failures, never exceptions.
    """

    def __init__(self, reply_fn: Callable[[PlanRequest, str], str]):
        self.reply_fn = reply_fn

    def plan(self, request: PlanRequest, graph: RoadGraph) -> PlanOutcome | None:
        prompt = build_prompt(graph, request.snapshot, request.origin, request.destination)
        try:
            reply = self.reply_fn(request, prompt)
        except Exception as exc:  # backend errors degrade to failures
            return PlanOutcome.fail(f"backend_error: {exc}")
        try:
            return PlanOutcome.ok(parse_path_from_text(reply))
        except PathParseError as exc:
            return PlanOutcome.fail(exc.code)
