"""Live per-edge occupancy registry and congestion factors.

The registry is the single source of truth for "who is on which road". Each
edge's congestion factor (CF) grows with the density of vehicles on it:

    CF = 1.0 + occupants * footprint / edge_length

so an empty edge sits at exactly 1.0 and every additional vehicle raises the
factor by footprint/length. Snapshots freeze the registry into an immutable
value that planners can consume concurrently.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass

from .network import RoadGraph, canonical_edge

log = logging.getLogger(__name__)

DEFAULT_FOOTPRINT = 100.0
DEFAULT_REPORT_THRESHOLD = 1.5


class CongestionError(RuntimeError):
    pass


class AlreadyOnEdge(CongestionError):
    pass


class NotOnEdge(CongestionError):
    pass


class UnknownEdge(CongestionError):
    pass


@dataclass(frozen=True)
class CongestionSnapshot:
    """Shared perception of the road state at one instant.

    ``entries`` holds (u, v, cf) for every edge at or above the report
    threshold, sorted by (u, v). Factors are kept unrounded here; rounding to
    one decimal happens only at the serialization boundary.
    """

    time: float
    entries: tuple[tuple[int, int, float], ...]

    def factor(self, u: int, v: int) -> float:
        key = canonical_edge(u, v)
        for eu, ev, cf in self.entries:
            if (eu, ev) == key:
                return cf
        return 1.0


EMPTY_SNAPSHOT = CongestionSnapshot(0.0, ())


class CongestionRegistry:
    """Tracks vehicle entry/exit per road segment.

    Mutated only by the simulation loop (single writer); snapshots are
    immutable and may be handed to planner threads freely. With
    ``strict=False`` bookkeeping violations are logged instead of raised.
    """

    def __init__(
        self,
        graph: RoadGraph,
        footprint: float = DEFAULT_FOOTPRINT,
        strict: bool = True,
    ):
        if footprint <= 0:
            raise ValueError(f"footprint must be positive, got {footprint}")
        self.graph = graph
        self.footprint = footprint
        self.strict = strict
        self._occupants: dict[tuple[int, int], set[int]] = {}
        self._edge_of_agent: dict[int, tuple[int, int]] = {}
        # Precomputed footprint/length per edge keeps the CF math cheap.
        self._density_step = {e.key(): footprint / e.length for e in graph.edges}

    def _violation(self, exc: CongestionError) -> None:
        if self.strict:
            raise exc
        log.warning("congestion bookkeeping violation ignored: %s", exc)

    def enter_edge(self, agent: int, edge: tuple[int, int], time: float) -> None:
        key = canonical_edge(*edge)
        if key not in self._density_step:
            raise UnknownEdge(f"no edge {key} in the graph")
        current = self._edge_of_agent.get(agent)
        if current is not None:
            self._violation(AlreadyOnEdge(f"agent {agent} is already on edge {current}"))
            return
        self._occupants.setdefault(key, set()).add(agent)
        self._edge_of_agent[agent] = key

    def exit_edge(self, agent: int, edge: tuple[int, int], time: float) -> None:
        key = canonical_edge(*edge)
        if key not in self._density_step:
            raise UnknownEdge(f"no edge {key} in the graph")
        if self._edge_of_agent.get(agent) != key:
            self._violation(NotOnEdge(f"agent {agent} is not on edge {key}"))
            return
        occupants = self._occupants[key]
        occupants.discard(agent)
        if not occupants:
            del self._occupants[key]
        del self._edge_of_agent[agent]

    def occupancy(self, edge: tuple[int, int]) -> int:
        key = canonical_edge(*edge)
        if key not in self._density_step:
            raise UnknownEdge(f"no edge {key} in the graph")
        return len(self._occupants.get(key, ()))

    def edge_of(self, agent: int) -> tuple[int, int] | None:
        return self._edge_of_agent.get(agent)

    def total_occupancy(self) -> int:
        return len(self._edge_of_agent)

    def congestion_factor(self, edge: tuple[int, int]) -> float:
        key = canonical_edge(*edge)
        step = self._density_step.get(key)
        if step is None:
            raise UnknownEdge(f"no edge {key} in the graph")
        count = len(self._occupants.get(key, ()))
        return 1.0 + count * step

    def occupied_factors(self) -> list[tuple[int, int, int, float]]:
        """(u, v, occupancy, cf) for every edge with at least one vehicle."""
        rows = []
        for key in sorted(self._occupants):
            count = len(self._occupants[key])
            rows.append((key[0], key[1], count, 1.0 + count * self._density_step[key]))
        return rows

    def snapshot(
        self, time: float, report_threshold: float = DEFAULT_REPORT_THRESHOLD
    ) -> CongestionSnapshot:
        """Freeze every edge whose CF meets the report threshold."""
        entries = tuple(
            (u, v, cf)
            for u, v, _count, cf in self.occupied_factors()
            if cf >= report_threshold - 1e-12
        )
        return CongestionSnapshot(time, entries)


def snapshot_to_json(snapshot: CongestionSnapshot) -> str:
    """Serialize a snapshot as a JSON array of [u, v, cf] triples.

    Factors are rounded to one decimal; entries stay sorted by (u, v). This
    exact format is embedded in planner prompts and metrics logs.
    """
    return json.dumps([[u, v, round(cf, 1)] for u, v, cf in snapshot.entries])
