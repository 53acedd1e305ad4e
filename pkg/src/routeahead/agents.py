"""Per-agent movement and decision state machine.

An agent advances continuously along road segments and keeps a buffer of the
nodes still ahead of it. Planner-driven agents come in two flavors:

* sequential — stops at every decision node (and at spawn) and stands still
  until its plan request resolves;
* concurrent — fires the same requests one node early, while still driving
  toward the decision node, and only stops if the answer has not arrived by
  the time it gets there.

Static agents plan once at spawn with the distance-only search and never talk
to the planner service. All asynchrony lives outside: responses reach agents
only through the per-tick inbox, and agents never block.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from enum import Enum

from .congestion import CongestionRegistry, CongestionSnapshot
from .manager import RequestHandle
from .network import RoadGraph, canonical_edge, min_cost_path, validate_path
from .planner import PlanRequest, PlanResponse

log = logging.getLogger(__name__)

DECISION_NODE_DEGREE = 3
CONGESTION_TRIGGER_CF = 2.0

_EPS = 1e-9


class AgentState(Enum):
    MOVING = "moving"
    THINKING = "thinking"
    WAITING = "waiting"
    ARRIVED = "arrived"


class AgentKind(Enum):
    STATIC = "astar"
    SEQUENTIAL = "sequential"
    CONCURRENT = "concurrent"


class TriggerReason(Enum):
    INITIALIZATION = "initialization"
    COMPLEX_NODE = "complex_node"
    CONGESTION_AHEAD = "congestion_ahead"


class AgentError(RuntimeError):
    pass


class CorruptBuffer(AgentError):
    """The path buffer no longer describes a drivable route — a missed
    fallback somewhere upstream."""


class RequestAlreadyPending(AgentError):
    pass


@dataclass
class AtNode:
    node: int


@dataclass
class OnEdge:
    from_node: int
    to_node: int
    progress: float  # meters from from_node

    def key(self) -> tuple[int, int]:
        return canonical_edge(self.from_node, self.to_node)


@dataclass
class RequestRecord:
    """Per-request log used by metrics and the timing-law checks."""

    request_id: int
    reason: TriggerReason
    origin: int
    issued_at: float
    approach_time: float | None = None  # full traversal time of the approach edge
    delivered_at: float | None = None
    success: bool | None = None
    pre_arrival: bool | None = None
    applied: bool = False
    rerouted: bool = False
    stop_wait: float = 0.0


@dataclass
class StopRecord:
    node: int
    started: float
    waited: float = 0.0
    ended: float | None = None


@dataclass
class JourneyStats:
    spawn_time: float
    origin: int
    destination: int
    arrival_time: float | None = None
    wait_time: float = 0.0
    reroute_count: int = 0
    route_taken: list[int] = field(default_factory=list)
    requests: list[RequestRecord] = field(default_factory=list)
    stops: list[StopRecord] = field(default_factory=list)
    fallback_replans: int = 0
    stale_responses: int = 0
    degenerate: bool = False

    @property
    def arrived(self) -> bool:
        return self.arrival_time is not None

    @property
    def journey_time(self) -> float | None:
        if self.arrival_time is None:
            return None
        return self.arrival_time - self.spawn_time


@dataclass
class PendingRequest:
    request_id: int
    origin: int
    record: RequestRecord
    handle: RequestHandle | None = None


# Events emitted by step_agent; the simulation applies them to the registry.


@dataclass(frozen=True)
class EdgeEntered:
    agent_id: int
    edge: tuple[int, int]
    time: float


@dataclass(frozen=True)
class EdgeExited:
    agent_id: int
    edge: tuple[int, int]
    time: float


@dataclass(frozen=True)
class AgentArrived:
    agent_id: int
    time: float


Event = EdgeEntered | EdgeExited | AgentArrived


class Agent:
    def __init__(
        self,
        agent_id: int,
        kind: AgentKind,
        origin: int,
        destination: int,
        spawn_time: float,
        speed: float = 10.0,
    ):
        self.id = agent_id
        self.kind = kind
        self.speed = speed
        self.destination = destination
        self.location: AtNode | OnEdge = AtNode(origin)
        self.state = AgentState.MOVING
        self.path_buffer: list[int] = []
        self.pending: PendingRequest | None = None
        self.stats = JourneyStats(spawn_time, origin, destination, route_taken=[origin])
        # One request per edge traversal: set when a request fires, cleared
        # when the node it was aimed at is passed.
        self.trigger_spent = False
        self.initial_plan_sent = False
        self.halt_reason: TriggerReason | None = None
        self._current_stop: StopRecord | None = None

    def __repr__(self) -> str:
        return f"Agent({self.id}, {self.kind.value}, {self.state.value})"

    @property
    def next_node(self) -> int | None:
        """The node the agent is currently headed for (or standing at)."""
        if isinstance(self.location, OnEdge):
            return self.location.to_node
        return self.location.node

    def buffer_target(self) -> int | None:
        """Far endpoint of the edge being (or about to be) traversed."""
        if isinstance(self.location, OnEdge):
            return self.location.to_node
        return self.path_buffer[0] if self.path_buffer else None


def spawn_agent(
    agent_id: int,
    kind: AgentKind,
    origin: int,
    destination: int,
    now: float,
    graph: RoadGraph,
    speed: float = 10.0,
) -> Agent:
    """Create an agent ready for its first tick.

    Static and concurrent agents receive a locally computed shortest path so
    they can start moving immediately; sequential agents spawn halted and ask
    the planner for their first route. A spawn whose origin equals its
    destination arrives instantly and is excluded from aggregates.
    """
    agent = Agent(agent_id, kind, origin, destination, now, speed)
    if origin == destination:
        agent.state = AgentState.ARRIVED
        agent.stats.arrival_time = now
        agent.stats.degenerate = True
        return agent
    if kind is AgentKind.SEQUENTIAL:
        agent.state = AgentState.THINKING
        agent.halt_reason = TriggerReason.INITIALIZATION
        agent._current_stop = StopRecord(origin, now)
        agent.stats.stops.append(agent._current_stop)
    else:
        agent.path_buffer = min_cost_path(graph, origin, destination)[1:]
    return agent


# --------------------------------------------------------------------------
# Triggers and request issuance


def _congestion_ahead(agent: Agent, registry: CongestionRegistry, skip_first: bool) -> bool:
    """True when a segment on the remaining route is at or past the trigger
    CF. The edge currently being driven is not scanned (it cannot be
    avoided); neither is the first buffer edge for a concurrent agent, since
    the plan request will start from its far endpoint anyway."""
    nodes = agent.path_buffer
    start = 1 if skip_first else 0
    prev: int | None = None
    if start == 0 and isinstance(agent.location, AtNode):
        prev = agent.location.node
    for i in range(start, len(nodes)):
        a = nodes[i - 1] if i > 0 else prev
        if a is None:
            continue
        if registry.congestion_factor((a, nodes[i])) >= CONGESTION_TRIGGER_CF:
            return True
    return False


def evaluate_triggers(
    agent: Agent, graph: RoadGraph, registry: CongestionRegistry
) -> TriggerReason | None:
    """Decide whether the agent should request a plan this tick.

    At most one trigger fires per edge traversal; a pending request always
    suppresses new ones. Static agents never trigger.
    """
    if agent.kind is AgentKind.STATIC or agent.state is AgentState.ARRIVED:
        return None
    if agent.pending is not None:
        return None

    if agent.kind is AgentKind.SEQUENTIAL:
        # Sequential agents evaluate while standing at a node: either the
        # spawn-time halt or a decision-node halt recorded on arrival.
        if agent.state is AgentState.THINKING and agent.halt_reason is not None:
            return agent.halt_reason
        return None

    # Concurrent: plan for the far endpoint of the edge being traversed.
    if not agent.initial_plan_sent:
        return TriggerReason.INITIALIZATION
    if agent.state is not AgentState.MOVING or not isinstance(agent.location, OnEdge):
        return None
    if agent.trigger_spent:
        return None
    target = agent.location.to_node
    if target == agent.destination:
        return None
    if graph.degree(target) >= DECISION_NODE_DEGREE:
        return TriggerReason.COMPLEX_NODE
    if _congestion_ahead(agent, registry, skip_first=True):
        return TriggerReason.CONGESTION_AHEAD
    return None


def planning_origin(agent: Agent, reason: TriggerReason) -> int | None:
    """Node the requested plan must start from.

    Concurrent agents plan from the node they are driving toward; sequential
    agents halt and plan from where they stand.
    """
    if agent.kind is AgentKind.SEQUENTIAL:
        return agent.location.node if isinstance(agent.location, AtNode) else None
    return agent.buffer_target()


def consume_trigger(agent: Agent, reason: TriggerReason, now: float) -> None:
    """Mark a trigger handled without issuing a request (e.g. the plan would
    start at the destination)."""
    if reason is TriggerReason.INITIALIZATION:
        agent.initial_plan_sent = True
    agent.trigger_spent = True
    if agent.kind is AgentKind.SEQUENTIAL and agent.state is AgentState.THINKING:
        agent.halt_reason = None
        agent.state = AgentState.MOVING
        _close_stop(agent, now)


def issue_precomputation(
    agent: Agent,
    reason: TriggerReason,
    origin: int,
    snapshot: CongestionSnapshot,
    now: float,
    request_id: int,
    graph: RoadGraph,
) -> PlanRequest:
    """Build the plan request for ``origin`` and mark it pending on the agent."""
    if agent.pending is not None:
        raise RequestAlreadyPending(
            f"agent {agent.id} already has request {agent.pending.request_id} pending"
        )
    record = RequestRecord(request_id, reason, origin, now)
    if agent.kind is AgentKind.CONCURRENT:
        here = (
            agent.location.from_node
            if isinstance(agent.location, OnEdge)
            else agent.location.node
        )
        if graph.has_edge(here, origin):
            record.approach_time = graph.edge_length(here, origin) / agent.speed
    agent.pending = PendingRequest(request_id, origin, record)
    agent.stats.requests.append(record)
    agent.initial_plan_sent = True
    agent.trigger_spent = True
    return PlanRequest(request_id, agent.id, origin, agent.destination, snapshot, now)


# --------------------------------------------------------------------------
# Plan application


def _buffer_valid(agent: Agent, graph: RoadGraph) -> bool:
    if not agent.path_buffer:
        return False
    if agent.path_buffer[-1] != agent.destination:
        return False
    loc = agent.location
    anchor = loc.node if isinstance(loc, AtNode) else loc.from_node
    if isinstance(loc, OnEdge) and agent.path_buffer[0] != loc.to_node:
        return False
    if not graph.has_edge(anchor, agent.path_buffer[0]):
        return False
    return validate_path(
        graph, agent.path_buffer, agent.path_buffer[0], agent.destination
    ).ok


def _static_fallback(agent: Agent, graph: RoadGraph) -> None:
    """Replace a missing or corrupt buffer with a locally computed shortest
    path from the agent's anchor node."""
    loc = agent.location
    if isinstance(loc, OnEdge):
        agent.path_buffer = min_cost_path(graph, loc.to_node, agent.destination)
    else:
        agent.path_buffer = min_cost_path(graph, loc.node, agent.destination)[1:]
    agent.stats.fallback_replans += 1


def _close_stop(agent: Agent, now: float) -> None:
    stop = agent._current_stop
    if stop is not None:
        stop.ended = now
        agent._current_stop = None


def apply_plan(agent: Agent, response: PlanResponse, graph: RoadGraph, now: float) -> str:
    """Apply or discard a delivered plan; returns "applied", "discarded", or
    "stale".

    A failed response, an invalid path, or a plan whose origin no longer
    matches the agent's next node is discarded: the agent keeps its previous
    buffer, or replans statically if none is valid. A waiting agent resumes
    movement either way.
    """
    pending = agent.pending
    if pending is None or response.request_id != pending.request_id:
        agent.stats.stale_responses += 1
        return "stale"

    record = pending.record
    record.delivered_at = now
    record.success = response.success
    record.pre_arrival = (
        isinstance(agent.location, OnEdge) and agent.state is AgentState.MOVING
    )
    agent.pending = None
    agent.halt_reason = None

    loc = agent.location
    expected_origin = loc.to_node if isinstance(loc, OnEdge) else loc.node

    accepted = False
    if response.success and pending.origin == expected_origin:
        plan = list(response.path or ())
        verdict = validate_path(graph, plan, pending.origin, agent.destination)
        if verdict.ok:
            accepted = True
            if isinstance(loc, OnEdge):
                incumbent = agent.path_buffer[1] if len(agent.path_buffer) > 1 else None
                agent.path_buffer = plan
            else:
                incumbent = agent.path_buffer[0] if agent.path_buffer else None
                agent.path_buffer = plan[1:]
            new_next = plan[1]
            if incumbent is not None and new_next != incumbent:
                agent.stats.reroute_count += 1
                record.rerouted = True
            record.applied = True

    if not accepted and not _buffer_valid(agent, graph):
        _static_fallback(agent, graph)

    if agent.state in (AgentState.WAITING, AgentState.THINKING):
        agent.state = AgentState.MOVING
        stop = agent._current_stop
        if stop is not None:
            record.stop_wait = stop.waited
        _close_stop(agent, now)
    return "applied" if accepted else "discarded"


# --------------------------------------------------------------------------
# Movement


def _sequential_halt_reason(
    agent: Agent, node: int, graph: RoadGraph, registry: CongestionRegistry
) -> TriggerReason | None:
    if graph.degree(node) >= DECISION_NODE_DEGREE:
        return TriggerReason.COMPLEX_NODE
    if _congestion_ahead(agent, registry, skip_first=False):
        return TriggerReason.CONGESTION_AHEAD
    return None


def handle_arrival(
    agent: Agent,
    node: int,
    now: float,
    graph: RoadGraph,
    registry: CongestionRegistry,
) -> list[Event]:
    """State transition on reaching a node: finish, wait for a pending plan,
    halt to think (sequential), or roll straight onto the next edge."""
    events: list[Event] = []
    agent.location = AtNode(node)
    if agent.path_buffer and agent.path_buffer[0] == node:
        agent.path_buffer.pop(0)
    agent.stats.route_taken.append(node)
    agent.trigger_spent = False

    if node == agent.destination:
        agent.state = AgentState.ARRIVED
        agent.stats.arrival_time = now
        _close_stop(agent, now)
        events.append(AgentArrived(agent.id, now))
        return events

    if agent.pending is not None and agent.pending.origin == node:
        agent.state = AgentState.WAITING
        agent._current_stop = StopRecord(node, now)
        agent.stats.stops.append(agent._current_stop)
        return events

    if agent.kind is AgentKind.SEQUENTIAL:
        reason = _sequential_halt_reason(agent, node, graph, registry)
        if reason is not None:
            agent.state = AgentState.THINKING
            agent.halt_reason = reason
            agent._current_stop = StopRecord(node, now)
            agent.stats.stops.append(agent._current_stop)
            return events

    if not agent.path_buffer:
        log.warning("agent %s reached node %s with an empty buffer; replanning", agent.id, node)
        _static_fallback(agent, graph)
    return events


def step_agent(
    agent: Agent,
    dt: float,
    now: float,
    graph: RoadGraph,
    registry: CongestionRegistry,
    inbox: tuple[PlanResponse, ...] | list[PlanResponse] = (),
) -> list[Event]:
    """Advance one tick: apply delivered plans, then move or wait.

    Movement carries across node boundaries within a tick (no per-edge
    rounding loss); edge transitions are reported as events for the
    congestion registry, which the simulation applies after all agents have
    stepped.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    events: list[Event] = []
    for response in inbox:
        apply_plan(agent, response, graph, now)
    if agent.state is AgentState.ARRIVED:
        return events

    if agent.state in (AgentState.THINKING, AgentState.WAITING):
        agent.stats.wait_time += dt
        if agent._current_stop is not None:
            agent._current_stop.waited += dt
        return events

    remaining = agent.speed * dt
    while remaining > _EPS and agent.state is AgentState.MOVING:
        loc = agent.location
        if isinstance(loc, AtNode):
            if not agent.path_buffer:
                log.warning(
                    "agent %s has no route at node %s; replanning", agent.id, loc.node
                )
                _static_fallback(agent, graph)
            nxt = agent.path_buffer[0]
            if not graph.has_edge(loc.node, nxt):
                raise CorruptBuffer(
                    f"agent {agent.id} buffer hop {loc.node}->{nxt} has no edge"
                )
            agent.location = OnEdge(loc.node, nxt, 0.0)
            events.append(EdgeEntered(agent.id, canonical_edge(loc.node, nxt), now))
            continue
        edge_len = graph.edge_length(loc.from_node, loc.to_node)
        step = min(remaining, edge_len - loc.progress)
        loc.progress += step
        remaining -= step
        if loc.progress >= edge_len - _EPS:
            events.append(EdgeExited(agent.id, loc.key(), now))
            events.extend(handle_arrival(agent, loc.to_node, now, graph, registry))
    return events
