"""Road network model: weighted undirected graphs, shortest paths, and the
built-in benchmark map.

Graphs are immutable after construction and safe to share across threads.
Edge lengths are stored explicitly (curved roads could exceed the straight-line
distance); the built-in map uses straight segments only.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from heapq import heappop, heappush
from typing import Callable, Iterable, Iterator

NodeId = int
Path = list[int]

_EPS = 1e-9
# Tolerance for "same total cost" when choosing among co-optimal routes.
_TIE_EPS = 1e-6


class GraphError(ValueError):
    """Base class for malformed-graph and failed-query errors."""


class SelfLoop(GraphError):
    pass


class DuplicateEdge(GraphError):
    pass


class UnknownEndpoint(GraphError):
    pass


class NonpositiveLength(GraphError):
    pass


class UnknownNode(GraphError):
    pass


class Unreachable(GraphError):
    pass


@dataclass(frozen=True)
class Node:
    id: int
    x: float
    y: float


@dataclass(frozen=True)
class Edge:
    u: int
    v: int
    length: float

    def key(self) -> tuple[int, int]:
        return (self.u, self.v)


def canonical_edge(a: int, b: int) -> tuple[int, int]:
    """Undirected edge key with the smaller node id first."""
    return (a, b) if a <= b else (b, a)


class RoadGraph:
    """Validated road network. Construct via :func:`build_graph`."""

    __slots__ = ("nodes", "edges", "adjacency", "_edge_ids")

    def __init__(
        self,
        nodes: tuple[Node, ...],
        edges: tuple[Edge, ...],
        adjacency: tuple[tuple[tuple[int, int], ...], ...],
        edge_ids: dict[tuple[int, int], int],
    ):
        self.nodes = nodes
        self.edges = edges
        # Per node: (neighbor id, edge index) pairs sorted by neighbor id.
        self.adjacency = adjacency
        self._edge_ids = edge_ids

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, RoadGraph):
            return NotImplemented
        return self.nodes == other.nodes and self.edges == other.edges

    def __repr__(self) -> str:
        return f"RoadGraph({len(self.nodes)} nodes, {len(self.edges)} edges)"

    @property
    def node_count(self) -> int:
        return len(self.nodes)

    def has_node(self, n: int) -> bool:
        return 0 <= n < len(self.nodes)

    def _check_node(self, n: int) -> None:
        if not self.has_node(n):
            raise UnknownNode(f"node {n} is not in the graph")

    def position(self, n: int) -> tuple[float, float]:
        self._check_node(n)
        node = self.nodes[n]
        return (node.x, node.y)

    def euclid(self, a: int, b: int) -> float:
        ax, ay = self.position(a)
        bx, by = self.position(b)
        return math.hypot(ax - bx, ay - by)

    def degree(self, n: int) -> int:
        self._check_node(n)
        return len(self.adjacency[n])

    def neighbors(self, n: int) -> list[int]:
        self._check_node(n)
        return [v for v, _ in self.adjacency[n]]

    def has_edge(self, a: int, b: int) -> bool:
        return canonical_edge(a, b) in self._edge_ids

    def edge_between(self, a: int, b: int) -> Edge | None:
        idx = self._edge_ids.get(canonical_edge(a, b))
        return None if idx is None else self.edges[idx]

    def edge_length(self, a: int, b: int) -> float:
        edge = self.edge_between(a, b)
        if edge is None:
            raise GraphError(f"no edge between {a} and {b}")
        return edge.length


def build_graph(nodes: Iterable[Node], edges: Iterable[Edge]) -> RoadGraph:
    """Validate and assemble a road graph.

    Edges are canonicalized to u < v. Raises a GraphError subclass naming the
    offending element on any violation.
    """
    node_list = tuple(nodes)
    edge_list = list(edges)
    if not node_list or not edge_list:
        raise GraphError("graph requires at least one node and one edge")

    ids = sorted(n.id for n in node_list)
    if ids != list(range(len(node_list))):
        raise GraphError(f"node ids must cover 0..{len(node_list) - 1} exactly, got {ids}")
    node_list = tuple(sorted(node_list, key=lambda n: n.id))
    seen_pos: dict[tuple[float, float], int] = {}
    for n in node_list:
        if not (math.isfinite(n.x) and math.isfinite(n.y)):
            raise GraphError(f"node {n.id} has non-finite position ({n.x}, {n.y})")
        pos = (n.x, n.y)
        if pos in seen_pos:
            raise GraphError(f"nodes {seen_pos[pos]} and {n.id} share position {pos}")
        seen_pos[pos] = n.id

    edge_ids: dict[tuple[int, int], int] = {}
    canonical: list[Edge] = []
    for e in edge_list:
        for endpoint in (e.u, e.v):
            if not (0 <= endpoint < len(node_list)):
                raise UnknownEndpoint(f"edge ({e.u}, {e.v}) references unknown node {endpoint}")
        if e.u == e.v:
            raise SelfLoop(f"edge ({e.u}, {e.v}) is a self-loop")
        if not math.isfinite(e.length) or e.length <= 0:
            raise NonpositiveLength(f"edge ({e.u}, {e.v}) has non-positive length {e.length}")
        u, v = canonical_edge(e.u, e.v)
        straight = math.hypot(node_list[u].x - node_list[v].x, node_list[u].y - node_list[v].y)
        if e.length < straight - 1e-6:
            raise GraphError(
                f"edge ({u}, {v}) length {e.length} is shorter than the straight-line "
                f"distance {straight:.6f}"
            )
        if (u, v) in edge_ids:
            raise DuplicateEdge(f"duplicate edge ({u}, {v})")
        edge_ids[(u, v)] = len(canonical)
        canonical.append(Edge(u, v, float(e.length)))

    adj: list[list[tuple[int, int]]] = [[] for _ in node_list]
    for idx, e in enumerate(canonical):
        adj[e.u].append((e.v, idx))
        adj[e.v].append((e.u, idx))
    adjacency = tuple(tuple(sorted(pairs)) for pairs in adj)
    return RoadGraph(node_list, tuple(canonical), adjacency, edge_ids)


def node_degree(graph: RoadGraph, n: int) -> int:
    """Number of road segments incident to node ``n``."""
    return graph.degree(n)


def min_cost_path(
    graph: RoadGraph,
    start: int,
    goal: int,
    edge_cost: Callable[[Edge], float] | None = None,
) -> Path:
    """Minimum-cost route from start to goal under an arbitrary edge cost.

    ``edge_cost`` must dominate the straight-line distance between the edge's
    endpoints (true for physical lengths and for any length multiplier >= 1),
    which keeps the straight-line heuristic admissible. Among co-optimal routes
    the lexicographically smallest node sequence is returned, so results are
    reproducible and independent of heap ordering.
    """
    graph._check_node(start)
    graph._check_node(goal)
    if start == goal:
        return [start]
    cost_of = edge_cost if edge_cost is not None else (lambda e: e.length)

    sx, sy = graph.position(start)

    def h(n: int) -> float:
        node = graph.nodes[n]
        return math.hypot(node.x - sx, node.y - sy)

    # Goal-rooted search so that settled costs are costs-to-goal; the heuristic
    # is the straight-line distance to the start node.
    dist: dict[int, float] = {goal: 0.0}
    settled: set[int] = set()
    best_total: float | None = None
    heap: list[tuple[float, int]] = [(h(goal), goal)]
    while heap:
        f, n = heappop(heap)
        if best_total is not None and f > best_total + _TIE_EPS:
            break
        if n in settled:
            continue
        settled.add(n)
        if n == start:
            best_total = dist[n]
        dn = dist[n]
        for nbr, eidx in graph.adjacency[n]:
            if nbr in settled:
                continue
            w = cost_of(graph.edges[eidx])
            nd = dn + w
            if nd < dist.get(nbr, math.inf) - _EPS:
                dist[nbr] = nd
                heappush(heap, (nd + h(nbr), nbr))

    if start not in settled:
        raise Unreachable(f"node {goal} is not reachable from node {start}")

    # Walk forward, always taking the smallest-id neighbor that stays on an
    # optimal continuation. Costs strictly decrease, so this terminates.
    path = [start]
    u = start
    for _ in range(len(graph.nodes) * 2):
        if u == goal:
            return path
        du = dist[u]
        nxt = None
        for nbr, eidx in graph.adjacency[u]:
            dv = dist.get(nbr)
            if dv is None:
                continue
            if abs(dv + cost_of(graph.edges[eidx]) - du) <= _TIE_EPS:
                nxt = nbr
                break
        if nxt is None:
            raise Unreachable(f"optimal-path walk failed at node {u}")
        path.append(nxt)
        u = nxt
    raise GraphError("path reconstruction exceeded the node budget")


def astar_shortest_path(graph: RoadGraph, start: int, goal: int) -> Path:
    """Shortest path by physical length (straight-line heuristic, smallest
    next node id on ties)."""
    return min_cost_path(graph, start, goal)


def path_length(graph: RoadGraph, path: Path) -> float:
    return sum(graph.edge_length(a, b) for a, b in zip(path, path[1:]))


@dataclass(frozen=True)
class Verdict:
    """Outcome of path validation; ``issue`` is None when the path is valid."""

    ok: bool
    issue: str | None = None
    node: int | None = None
    edge: tuple[int, int] | None = None

    def __bool__(self) -> bool:
        return self.ok


def validate_path(
    graph: RoadGraph, path: Iterable[int], expected_start: int, destination: int
) -> Verdict:
    """Check a proposed route without ever raising.

    Reports the first violation among: empty path, wrong start node, wrong end
    node, a node outside the graph, a hop with no road segment.
    """
    seq = list(path)
    if not seq:
        return Verdict(False, "empty_path")
    if seq[0] != expected_start:
        return Verdict(False, "wrong_start", node=seq[0])
    if seq[-1] != destination:
        return Verdict(False, "wrong_end", node=seq[-1])
    for n in seq:
        if not isinstance(n, int) or isinstance(n, bool) or not graph.has_node(n):
            return Verdict(False, "unknown_node", node=n)
    for a, b in zip(seq, seq[1:]):
        if not graph.has_edge(a, b):
            return Verdict(False, "missing_edge", edge=(a, b))
    return Verdict(True)


def path_edges(path: Path) -> Iterator[tuple[int, int]]:
    for a, b in zip(path, path[1:]):
        yield canonical_edge(a, b)


GRID_SPACING = 150.0


def default_map() -> RoadGraph:
    """The built-in benchmark map: a 4x3 grid of intersections at 150 m
    spacing plus three diagonal shortcuts.

    12 nodes, 20 bidirectional segments; ten nodes have degree >= 3. The grid
    layout is one realization consistent with those counts; node ids run
    row-major (node = row * 4 + col).
    """
    nodes = [
        Node(r * 4 + c, c * GRID_SPACING, r * GRID_SPACING)
        for r in range(3)
        for c in range(4)
    ]
    pairs: list[tuple[int, int]] = []
    for r in range(3):
        for c in range(3):
            pairs.append((r * 4 + c, r * 4 + c + 1))
    for r in range(2):
        for c in range(4):
            pairs.append((r * 4 + c, (r + 1) * 4 + c))
    pairs += [(0, 5), (5, 10), (6, 11)]
    edges = [
        Edge(u, v, math.hypot(nodes[u].x - nodes[v].x, nodes[u].y - nodes[v].y))
        for u, v in pairs
    ]
    return build_graph(nodes, edges)


def map_to_dict(graph: RoadGraph) -> dict:
    return {
        "nodes": [{"id": n.id, "x": n.x, "y": n.y} for n in graph.nodes],
        "edges": [{"u": e.u, "v": e.v, "length": e.length} for e in graph.edges],
    }


def map_from_dict(data: dict) -> RoadGraph:
    """Build a graph from the JSON map schema.

    ``edges[*].length`` may be omitted, in which case the straight-line
    distance between the endpoints is used.
    """
    try:
        raw_nodes = data["nodes"]
        raw_edges = data["edges"]
    except (KeyError, TypeError) as exc:
        raise GraphError(f"map document must contain 'nodes' and 'edges': {exc}") from exc
    nodes = [Node(int(n["id"]), float(n["x"]), float(n["y"])) for n in raw_nodes]
    pos = {n.id: (n.x, n.y) for n in nodes}
    edges = []
    for e in raw_edges:
        u, v = int(e["u"]), int(e["v"])
        length = e.get("length")
        if length is None:
            if u not in pos or v not in pos:
                raise UnknownEndpoint(f"edge ({u}, {v}) references unknown node")
            length = math.hypot(pos[u][0] - pos[v][0], pos[u][1] - pos[v][1])
        edges.append(Edge(u, v, float(length)))
    return build_graph(nodes, edges)


def load_map(path: str) -> RoadGraph:
    with open(path, "r", encoding="utf-8") as fh:
        return map_from_dict(json.load(fh))


def save_map(graph: RoadGraph, path: str) -> None:
    from .fileio import atomic_write_text

    atomic_write_text(path, json.dumps(map_to_dict(graph), indent=2) + "\n")
