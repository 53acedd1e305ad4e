"""Deterministic fixed-timestep simulation engine and experiment driver.

Each tick runs a fixed phase order: advance the clock, spawn due agents,
drain planner completions, step every agent in id order (apply inbox, check
triggers, issue requests, move), apply edge transitions to the congestion
registry, record metrics. In virtual-time mode the whole system is a single
thread and a (config, seed) pair reproduces byte-identical results.
"""

from __future__ import annotations

import hashlib
import logging
import random
import statistics
import time as _time
from dataclasses import dataclass, field, asdict
from typing import Any

from . import agents as agents_mod
from .agents import (
    Agent,
    AgentArrived,
    AgentKind,
    AgentState,
    EdgeEntered,
    EdgeExited,
    JourneyStats,
    OnEdge,
    apply_plan,
    consume_trigger,
    evaluate_triggers,
    issue_precomputation,
    planning_origin,
    spawn_agent,
    step_agent,
)
from .congestion import CongestionRegistry
from .manager import RequestManager, WallClockRequestManager
from .network import RoadGraph, default_map, load_map
from .planner import (
    FixedLatency,
    LatencyModel,
    LogNormalLatency,
    NeverRespondingBackend,
    OracleBackend,
    StaticBackend,
    UniformLatency,
)

log = logging.getLogger(__name__)

ARMS = ("astar", "sequential", "concurrent")
_KIND_BY_ARM = {
    "astar": AgentKind.STATIC,
    "sequential": AgentKind.SEQUENTIAL,
    "concurrent": AgentKind.CONCURRENT,
}


class InvalidConfig(ValueError):
    """Configuration rejected; ``problems`` lists per-field diagnostics."""

    def __init__(self, problems: list[str]):
        super().__init__("; ".join(problems))
        self.problems = problems


class InvariantViolation(RuntimeError):
    pass


@dataclass
class ScenarioConfig:
    scenario: str = "scenario"
    map: str = "default"
    agents: int = 10
    arm: str = "concurrent"
    mix: dict[str, int] | None = None
    spawn_window: float = 10.0
    seed: int = 0
    dt: float = 0.1
    speed: float = 10.0
    backend: str = "oracle"
    latency: dict = field(default_factory=lambda: {"model": "fixed", "value": 3.2})
    footprint: float = 100.0
    report_threshold: float = 1.5
    timeout: float = 10.0
    max_in_flight: int = 4
    queue_capacity: int = 256
    max_sim_time: float = 600.0
    repetitions: int = 1
    clock: str = "virtual"
    congestion_trace: bool = False
    od_pairs: list | None = None
    llm_url: str | None = None
    llm_model: str | None = None
    llm_request_timeout: float = 30.0

    ALIASES = {"agent_count": "agents", "threshold": "report_threshold"}

    @classmethod
    def from_dict(cls, data: dict) -> "ScenarioConfig":
        known = {f for f in cls.__dataclass_fields__}
        problems = []
        clean: dict[str, Any] = {}
        for key, value in (data or {}).items():
            key = cls.ALIASES.get(key, key)
            if key not in known:
                problems.append(f"unknown config key '{key}'")
            else:
                clean[key] = value
        if problems:
            raise InvalidConfig(problems)
        config = cls(**clean)
        config.validate()
        return config

    def validate(self) -> None:
        problems = []
        if self.agents < 1:
            problems.append(f"agents must be >= 1, got {self.agents}")
        if self.arm not in ARMS:
            problems.append(f"arm must be one of {ARMS}, got '{self.arm}'")
        if self.mix is not None:
            for key in self.mix:
                if key not in ARMS:
                    problems.append(f"mix key '{key}' is not one of {ARMS}")
            if self.mix and sum(self.mix.values()) != self.agents:
                problems.append("mix counts must sum to 'agents'")
        if self.spawn_window < 0:
            problems.append("spawn_window must be >= 0")
        if self.dt <= 0:
            problems.append(f"dt must be positive, got {self.dt}")
        if self.speed <= 0:
            problems.append(f"speed must be positive, got {self.speed}")
        if self.backend not in ("oracle", "static", "never", "llm"):
            problems.append(f"unknown backend '{self.backend}'")
        if self.footprint <= 0:
            problems.append("footprint must be positive")
        if self.report_threshold < 1.0:
            problems.append("report_threshold must be >= 1.0")
        if self.timeout <= 0:
            problems.append("timeout must be positive")
        if self.max_in_flight < 1:
            problems.append("max_in_flight must be >= 1")
        if self.queue_capacity < 1:
            problems.append("queue_capacity must be >= 1")
        if not (0 < self.max_sim_time < float("inf")):
            problems.append("max_sim_time must be positive and finite")
        if self.repetitions < 1:
            problems.append(f"repetitions must be >= 1, got {self.repetitions}")
        if self.clock not in ("virtual", "wall"):
            problems.append(f"clock must be 'virtual' or 'wall', got '{self.clock}'")
        if self.od_pairs is not None:
            try:
                pairs = [(int(o), int(d)) for o, d in self.od_pairs]
            except (TypeError, ValueError):
                problems.append("od_pairs must be a list of [origin, destination] pairs")
            else:
                self.od_pairs = pairs
        try:
            build_latency_model(self.latency, self.seed)
        except (InvalidConfig, ValueError) as exc:
            problems.append(f"latency: {exc}")
        if self.backend == "llm" and self.clock == "virtual":
            problems.append("the llm backend requires clock: wall")
        if problems:
            raise InvalidConfig(problems)

    def to_dict(self) -> dict:
        return asdict(self)


def build_latency_model(spec: dict, default_seed: int = 0) -> LatencyModel:
    if isinstance(spec, (int, float)):
        return FixedLatency(float(spec))
    if not isinstance(spec, dict):
        raise InvalidConfig([f"latency spec must be a number or mapping, got {spec!r}"])
    model = spec.get("model", "fixed")
    seed = int(spec.get("seed", default_seed))
    if model == "fixed":
        return FixedLatency(float(spec.get("value", 3.2)))
    if model == "uniform":
        return UniformLatency(float(spec["low"]), float(spec["high"]), seed)
    if model == "lognormal":
        return LogNormalLatency(float(spec["mu"]), float(spec["sigma"]), seed)
    raise InvalidConfig([f"unknown latency model '{model}'"])


def build_backend(config: ScenarioConfig, graph: RoadGraph):
    if config.backend == "oracle":
        return OracleBackend()
    if config.backend == "static":
        return StaticBackend()
    if config.backend == "never":
        return NeverRespondingBackend()
    if config.backend == "llm":
        from .llm import LlmEndpoint, live_backend

        if not config.llm_url:
            raise InvalidConfig(["backend 'llm' requires llm_url"])
        endpoint = LlmEndpoint(
            base_url=config.llm_url,
            model=config.llm_model or "default",
            request_timeout=config.llm_request_timeout,
        )
        return live_backend(endpoint)
    raise InvalidConfig([f"unknown backend '{config.backend}'"])


@dataclass(frozen=True)
class SpawnEvent:
    time: float
    agent_id: int
    kind: AgentKind
    origin: int
    destination: int


def build_schedule(config: ScenarioConfig, graph: RoadGraph) -> list[SpawnEvent]:
    """Seeded spawn schedule: times uniform over [0, spawn_window], origin and
    destination uniform over distinct node pairs (or the configured od list).
    Identical for every arm at the same seed, so arms face identical demand.
    """
    rng = random.Random(config.seed)
    n = graph.node_count
    kinds: list[AgentKind] = []
    if config.mix:
        for arm in ARMS:
            kinds.extend([_KIND_BY_ARM[arm]] * int(config.mix.get(arm, 0)))
    else:
        kinds = [_KIND_BY_ARM[config.arm]] * config.agents
    events = []
    for agent_id in range(config.agents):
        t = rng.uniform(0.0, config.spawn_window) if config.spawn_window > 0 else 0.0
        if config.od_pairs:
            origin, dest = config.od_pairs[agent_id % len(config.od_pairs)]
        else:
            origin = rng.randrange(n)
            dest = rng.randrange(n - 1)
            if dest >= origin:
                dest += 1
        events.append(SpawnEvent(t, agent_id, kinds[agent_id], origin, dest))
    events.sort(key=lambda e: (e.time, e.agent_id))
    return events


def schedule_hash(schedule: list[SpawnEvent]) -> str:
    """Demand fingerprint, independent of agent kind (for paired-seed checks)."""
    payload = ";".join(
        f"{e.agent_id}:{e.time:.9f}:{e.origin}:{e.destination}"
        for e in sorted(schedule, key=lambda e: e.agent_id)
    )
    return hashlib.sha256(payload.encode()).hexdigest()[:16]


@dataclass
class AgentResult:
    agent_id: int
    kind: str
    stats: JourneyStats


@dataclass
class RunMetrics:
    arm: str
    seed: int
    agents: list[AgentResult]
    max_congestion: float
    manager: dict[str, int]
    schedule_hash: str
    sim_time: float
    ticks: int
    invariant_checks: int
    invariant_violations: int
    unresolved_requests: int
    waiting_at_end: int
    stale_to_arrived: int
    congestion_trace: list[tuple[float, int, int, int, float]] = field(default_factory=list)

    def _measured(self) -> list[JourneyStats]:
        return [a.stats for a in self.agents if a.stats.arrived and not a.stats.degenerate]

    @property
    def arrived_count(self) -> int:
        return sum(1 for a in self.agents if a.stats.arrived)

    @property
    def failed_count(self) -> int:
        return sum(1 for a in self.agents if not a.stats.arrived)

    @property
    def avg_journey_time(self) -> float:
        rows = [s.journey_time for s in self._measured()]
        return statistics.fmean(rows) if rows else 0.0

    @property
    def avg_wait_time(self) -> float:
        rows = [s.wait_time for s in self._measured()]
        return statistics.fmean(rows) if rows else 0.0

    @property
    def avg_reroute_count(self) -> float:
        rows = [s.reroute_count for s in self._measured()]
        return statistics.fmean(rows) if rows else 0.0

    @property
    def pre_arrival_rate(self) -> float:
        flags = [
            bool(r.pre_arrival)
            for a in self.agents
            if a.kind == "concurrent"
            for r in a.stats.requests
            if r.success
        ]
        return statistics.fmean(flags) if flags else 0.0

    def summary_dict(self) -> dict:
        return {
            "arm": self.arm,
            "seed": self.seed,
            "agents": len(self.agents),
            "arrived": self.arrived_count,
            "failed": self.failed_count,
            "avg_journey_s": round(self.avg_journey_time, 6),
            "avg_wait_s": round(self.avg_wait_time, 6),
            "max_congestion": round(self.max_congestion, 6),
            "avg_reroutes": round(self.avg_reroute_count, 6),
            "pre_arrival_rate": round(self.pre_arrival_rate, 6),
            "sim_time_s": round(self.sim_time, 6),
            "ticks": self.ticks,
            "schedule_hash": self.schedule_hash,
            "requests": self.manager,
            "invariant_checks": self.invariant_checks,
            "invariant_violations": self.invariant_violations,
        }


class Simulation:
    """One scenario instance; drive with :meth:`run_tick` or
    :meth:`run_to_completion`."""

    def __init__(
        self,
        config: ScenarioConfig,
        arm: str | None = None,
        backend: object | None = None,
    ):
        config.validate()
        self.config = config
        self.arm = arm or config.arm
        if self.arm not in ARMS:
            raise InvalidConfig([f"arm must be one of {ARMS}, got '{self.arm}'"])
        self.graph = default_map() if config.map == "default" else load_map(config.map)
        self.registry = CongestionRegistry(self.graph, config.footprint)
        self.dt = config.dt
        self._tick = -1
        self._wall_start: float | None = None

        effective = ScenarioConfig(**{**config.to_dict(), "arm": self.arm})
        if config.mix is None:
            effective.mix = None
        self.schedule = build_schedule(effective, self.graph)
        self.schedule_hash = schedule_hash(self.schedule)
        self._spawn_idx = 0
        self.agents: dict[int, Agent] = {}

        backend = backend if backend is not None else build_backend(config, self.graph)
        latency = build_latency_model(config.latency, config.seed)
        if config.clock == "wall":
            self.manager = WallClockRequestManager(
                backend,
                self.graph,
                max_in_flight=config.max_in_flight,
                queue_capacity=config.queue_capacity,
                timeout=config.timeout,
            )
        else:
            self.manager = RequestManager(
                backend,
                self.graph,
                latency,
                max_in_flight=config.max_in_flight,
                queue_capacity=config.queue_capacity,
                timeout=config.timeout,
            )
        self._request_counter = 0
        self.peak_congestion = 1.0
        self.invariant_checks = 0
        self.invariant_violations = 0
        self.stale_to_arrived = 0
        self.trace_rows: list[tuple[float, int, int, int, float]] = []

    @property
    def now(self) -> float:
        return max(self._tick, 0) * self.dt

    def _advance(self) -> float:
        self._tick += 1
        if self.config.clock == "wall":
            if self._wall_start is None:
                self._wall_start = _time.monotonic()
            target = self._wall_start + self._tick * self.dt
            delay = target - _time.monotonic()
            if delay > 0:
                _time.sleep(delay)
            return _time.monotonic() - self._wall_start
        return self._tick * self.dt

    def _next_request_id(self) -> int:
        rid = self._request_counter
        self._request_counter += 1
        return rid

    @property
    def finished(self) -> bool:
        return self._spawn_idx >= len(self.schedule) and all(
            a.state is AgentState.ARRIVED for a in self.agents.values()
        )

    def run_tick(self) -> None:
        now = self._advance()

        while self._spawn_idx < len(self.schedule) and self.schedule[self._spawn_idx].time <= now:
            ev = self.schedule[self._spawn_idx]
            self._spawn_idx += 1
            self.agents[ev.agent_id] = spawn_agent(
                ev.agent_id, ev.kind, ev.origin, ev.destination, now,
                self.graph, self.config.speed,
            )

        delivered = self.manager.drain_completions(now)

        events = []
        for agent_id in sorted(self.agents):
            agent = self.agents[agent_id]
            if agent.state is AgentState.ARRIVED:
                continue
            for response in delivered.pop(agent_id, ()):
                apply_plan(agent, response, self.graph, now)
            if agent.kind is not AgentKind.STATIC:
                reason = evaluate_triggers(agent, self.graph, self.registry)
                if reason is not None:
                    origin = planning_origin(agent, reason)
                    if origin is None or origin == agent.destination:
                        consume_trigger(agent, reason, now)
                    else:
                        snapshot = self.registry.snapshot(now, self.config.report_threshold)
                        request = issue_precomputation(
                            agent, reason, origin, snapshot, now,
                            self._next_request_id(), self.graph,
                        )
                        agent.pending.handle = self.manager.submit(request)
            events.extend(step_agent(agent, self.dt, now, self.graph, self.registry))

        # responses routed to agents that arrived on an earlier tick
        for _agent_id, responses in delivered.items():
            self.stale_to_arrived += len(responses)

        for event in events:
            if isinstance(event, EdgeEntered):
                self.registry.enter_edge(event.agent_id, event.edge, event.time)
                cf = self.registry.congestion_factor(event.edge)
                if cf > self.peak_congestion:
                    self.peak_congestion = cf
            elif isinstance(event, EdgeExited):
                self.registry.exit_edge(event.agent_id, event.edge, event.time)
            elif isinstance(event, AgentArrived):
                agent = self.agents[event.agent_id]
                if agent.pending is not None:
                    if agent.pending.handle is not None:
                        self.manager.cancel(agent.pending.handle)
                    agent.pending = None

        self._check_invariants()

        if self.config.congestion_trace:
            for u, v, occupancy, cf in self.registry.occupied_factors():
                self.trace_rows.append((now, u, v, occupancy, cf))

    def _check_invariants(self) -> None:
        self.invariant_checks += 1
        on_edges = sum(
            1 for a in self.agents.values() if isinstance(a.location, OnEdge)
        )
        registered = self.registry.total_occupancy()
        if on_edges != registered:
            self.invariant_violations += 1
            raise InvariantViolation(
                f"occupancy mismatch at t={self.now:.1f}: registry says {registered}, "
                f"agents say {on_edges}"
            )

    def run_to_completion(self) -> RunMetrics:
        while not self.finished and self.now < self.config.max_sim_time:
            self.run_tick()
        self.manager.cancel_all()
        for agent in self.agents.values():
            agent.pending = None
        return self._metrics()

    def _metrics(self) -> RunMetrics:
        waiting = sum(
            1
            for a in self.agents.values()
            if a.state in (AgentState.WAITING, AgentState.THINKING)
        )
        results = [
            AgentResult(a.id, a.kind.value, a.stats)
            for a in (self.agents[i] for i in sorted(self.agents))
        ]
        return RunMetrics(
            arm=self.arm,
            seed=self.config.seed,
            agents=results,
            max_congestion=self.peak_congestion,
            manager=self.manager.stats.as_dict(),
            schedule_hash=self.schedule_hash,
            sim_time=self.now,
            ticks=max(self._tick, 0),
            invariant_checks=self.invariant_checks,
            invariant_violations=self.invariant_violations,
            unresolved_requests=self.manager.unresolved_count,
            waiting_at_end=waiting,
            stale_to_arrived=self.stale_to_arrived,
            congestion_trace=self.trace_rows,
        )


def init_scenario(
    config: ScenarioConfig, arm: str | None = None, backend: object | None = None
) -> Simulation:
    return Simulation(config, arm=arm, backend=backend)


def run_scenario(
    config: ScenarioConfig,
    arm: str | None = None,
    seed: int | None = None,
    backend: object | None = None,
) -> RunMetrics:
    """Run one scenario to completion, optionally overriding arm and seed."""
    if seed is not None and seed != config.seed:
        config = ScenarioConfig(**{**config.to_dict(), "seed": seed})
    sim = Simulation(config, arm=arm, backend=backend)
    return sim.run_to_completion()


@dataclass
class ArmSummary:
    arm: str
    runs: int
    arrival_rate: float
    mean_journey: float
    std_journey: float
    mean_wait: float
    std_wait: float
    mean_max_congestion: float
    std_max_congestion: float
    mean_reroutes: float
    std_reroutes: float
    mean_pre_arrival_rate: float

    def to_dict(self) -> dict:
        return {k: (round(v, 6) if isinstance(v, float) else v) for k, v in asdict(self).items()}


@dataclass
class ComparisonSummary:
    rows: list[ArmSummary]
    schedule_hashes: dict[str, list[str]]

    def to_dict(self) -> dict:
        return {
            "arms": [r.to_dict() for r in self.rows],
            "schedule_hashes": self.schedule_hashes,
        }


def _mean_std(values: list[float]) -> tuple[float, float]:
    if not values:
        return (0.0, 0.0)
    return (statistics.fmean(values), statistics.pstdev(values))


def summarize(runs_by_arm: dict[str, list[RunMetrics]]) -> ComparisonSummary:
    """Per-arm means and standard deviations across repetitions."""
    rows = []
    hashes: dict[str, list[str]] = {}
    order = [a for a in ARMS if a in runs_by_arm] + sorted(set(runs_by_arm) - set(ARMS))
    for arm in order:
        runs = runs_by_arm[arm]
        if not runs:
            raise ValueError(f"arm '{arm}' has no runs")
        journey = _mean_std([r.avg_journey_time for r in runs])
        wait = _mean_std([r.avg_wait_time for r in runs])
        cong = _mean_std([r.max_congestion for r in runs])
        reroutes = _mean_std([r.avg_reroute_count for r in runs])
        pre = _mean_std([r.pre_arrival_rate for r in runs])
        spawned = sum(len(r.agents) for r in runs)
        arrived = sum(r.arrived_count for r in runs)
        rows.append(
            ArmSummary(
                arm=arm,
                runs=len(runs),
                arrival_rate=arrived / spawned if spawned else 0.0,
                mean_journey=journey[0],
                std_journey=journey[1],
                mean_wait=wait[0],
                std_wait=wait[1],
                mean_max_congestion=cong[0],
                std_max_congestion=cong[1],
                mean_reroutes=reroutes[0],
                std_reroutes=reroutes[1],
                mean_pre_arrival_rate=pre[0],
            )
        )
        hashes[arm] = [r.schedule_hash for r in runs]
    return ComparisonSummary(rows, hashes)


def run_comparison(
    config: ScenarioConfig,
    arms: list[str],
    repetitions: int | None = None,
    backend: object | None = None,
) -> dict[str, list[RunMetrics]]:
    """Run every arm with paired seeds: repetition k of each arm shares
    seed (config.seed + k), so arms face identical spawn schedules."""
    reps = repetitions if repetitions is not None else config.repetitions
    if reps < 1:
        raise InvalidConfig([f"repetitions must be >= 1, got {reps}"])
    for arm in arms:
        if arm not in ARMS:
            raise InvalidConfig([f"arm must be one of {ARMS}, got '{arm}'"])
    runs: dict[str, list[RunMetrics]] = {arm: [] for arm in arms}
    for k in range(reps):
        for arm in arms:
            runs[arm].append(
                run_scenario(config, arm=arm, seed=config.seed + k, backend=backend)
            )
    hashes = {arm: [r.schedule_hash for r in rs] for arm, rs in runs.items()}
    first = next(iter(hashes.values()))
    for arm, hs in hashes.items():
        if hs != first:
            raise InvariantViolation(
                f"paired-seed discipline broken: {arm} saw schedules {hs} != {first}"
            )
    return runs
