"""Network graph model: nodes, links, domains, paths and path search.

A :class:`Topology` is immutable after construction and safe to share
between concurrent readers.  All path operations are pure functions of
their inputs and use a fully specified ordering (metric, then total
latency, then lexicographic link-id sequence) so independent runs agree
bit for bit.
"""

from __future__ import annotations

import heapq
import json
from dataclasses import dataclass

from .errors import (
    DanglingEndpointError,
    DuplicateIdError,
    InvalidPathError,
    ScenarioError,
    UnknownLinkError,
    UnknownNodeError,
)

NODE_KINDS = frozenset({"switch", "host"})
LINK_KINDS = frozenset({"direct_l2", "gre", "overlay"})

# Fraction of nominal link capacity usable by traffic.  Direct L2 paths
# lose ~6% to Ethernet/IP/TCP framing; tunnel capacities are quoted
# after encapsulation overhead, so they default to 1.0.
DEFAULT_EFFICIENCY = {"direct_l2": 0.94, "gre": 1.0, "overlay": 1.0}


@dataclass(frozen=True)
class Node:
    id: str
    kind: str
    domain: str

    def __post_init__(self):
        if self.kind not in NODE_KINDS:
            raise ScenarioError(f"unknown node kind {self.kind!r}", f"node {self.id}")


@dataclass(frozen=True)
class Link:
    """Bidirectional link with the full capacity independently available
    in each direction."""

    id: str
    a: str
    b: str
    capacity_mbps: float
    latency_ms: float
    kind: str
    efficiency: float | None = None

    def __post_init__(self):
        if self.kind not in LINK_KINDS:
            raise ScenarioError(f"unknown link kind {self.kind!r}", f"link {self.id}")
        if self.a == self.b:
            raise ScenarioError("link endpoints must differ", f"link {self.id}")
        if not self.capacity_mbps > 0:
            raise ScenarioError("capacity_mbps must be positive", f"link {self.id}")
        if self.latency_ms < 0:
            raise ScenarioError("latency_ms must be non-negative", f"link {self.id}")
        if self.efficiency is not None and not 0 < self.efficiency <= 1:
            raise ScenarioError("efficiency must be in (0, 1]", f"link {self.id}")

    @property
    def effective_capacity_mbps(self) -> float:
        eta = self.efficiency if self.efficiency is not None else DEFAULT_EFFICIENCY[self.kind]
        return self.capacity_mbps * eta

    def other_end(self, node_id: str) -> str:
        if node_id == self.a:
            return self.b
        if node_id == self.b:
            return self.a
        raise UnknownNodeError(f"node {node_id!r} is not an endpoint of link {self.id!r}")


@dataclass(frozen=True)
class Path:
    """A simple path given as the ordered link ids from src to dst."""

    src: str
    dst: str
    hops: tuple[str, ...]

    def node_sequence(self, t: "Topology") -> list[str]:
        """Return the node ids visited, src first, validating contiguity."""
        nodes = [self.src]
        here = self.src
        for link_id in self.hops:
            link = t.link(link_id)
            here = link.other_end(here)
            nodes.append(here)
        if here != self.dst:
            raise InvalidPathError(f"path hops end at {here!r}, not dst {self.dst!r}")
        return nodes

    def validate(self, t: "Topology") -> None:
        if not self.hops:
            raise InvalidPathError("path must have at least one hop")
        nodes = self.node_sequence(t)
        if len(set(nodes)) != len(nodes):
            raise InvalidPathError(f"path {self.hops} revisits a node")

    def directed_hops(self, t: "Topology") -> list[tuple[str, str, str]]:
        """Return (link_id, from_node, to_node) per hop."""
        nodes = self.node_sequence(t)
        return [(lid, nodes[i], nodes[i + 1]) for i, lid in enumerate(self.hops)]


@dataclass(frozen=True)
class PathMetrics:
    bottleneck_mbps: float
    total_latency_ms: float
    hop_count: int


class Topology:
    """Validated immutable network graph with deterministic port numbering.

    Each node's incident links are sorted by link id and numbered from
    port 1 upward; the numbering is a pure function of the topology.
    """

    def __init__(self, nodes: list[Node], links: list[Link]):
        self._nodes: dict[str, Node] = {}
        for n in nodes:
            if n.id in self._nodes:
                raise DuplicateIdError(f"duplicate node id {n.id!r}")
            self._nodes[n.id] = n
        self._links: dict[str, Link] = {}
        for l in links:
            if l.id in self._links:
                raise DuplicateIdError(f"duplicate link id {l.id!r}")
            for end in (l.a, l.b):
                if end not in self._nodes:
                    raise DanglingEndpointError(
                        f"link {l.id!r} references unknown node {end!r}"
                    )
            self._links[l.id] = l
        self._incident: dict[str, tuple[Link, ...]] = {
            nid: tuple(sorted((l for l in self._links.values() if nid in (l.a, l.b)),
                              key=lambda l: l.id))
            for nid in self._nodes
        }
        self._ports: dict[str, dict[str, int]] = {
            nid: {l.id: i + 1 for i, l in enumerate(incident)}
            for nid, incident in self._incident.items()
        }

    @property
    def nodes(self) -> list[Node]:
        return list(self._nodes.values())

    @property
    def links(self) -> list[Link]:
        return list(self._links.values())

    def node(self, node_id: str) -> Node:
        try:
            return self._nodes[node_id]
        except KeyError:
            raise UnknownNodeError(f"unknown node {node_id!r}") from None

    def has_node(self, node_id: str) -> bool:
        return node_id in self._nodes

    def link(self, link_id: str) -> Link:
        try:
            return self._links[link_id]
        except KeyError:
            raise UnknownLinkError(f"unknown link {link_id!r}") from None

    def has_link(self, link_id: str) -> bool:
        return link_id in self._links

    def links_at(self, node_id: str) -> tuple[Link, ...]:
        self.node(node_id)
        return self._incident[node_id]

    def port_of(self, node_id: str, link_id: str) -> int:
        self.node(node_id)
        try:
            return self._ports[node_id][link_id]
        except KeyError:
            raise UnknownLinkError(
                f"link {link_id!r} is not incident to node {node_id!r}"
            ) from None

    def link_at_port(self, node_id: str, port: int) -> Link:
        incident = self.links_at(node_id)
        if not 1 <= port <= len(incident):
            raise UnknownLinkError(f"node {node_id!r} has no port {port}")
        return incident[port - 1]

    def is_host(self, node_id: str) -> bool:
        return self.node(node_id).kind == "host"

    def domains(self) -> list[str]:
        return sorted({n.domain for n in self._nodes.values()})


# ---------------------------------------------------------------------------
# Scenario-document parsing (topology section)

_NODE_FIELDS = {"id": str, "kind": str, "domain": str}
_LINK_FIELDS = {"id": str, "a": str, "b": str,
                "capacity_mbps": (int, float), "latency_ms": (int, float), "kind": str}
_LINK_OPTIONAL = {"efficiency": (int, float)}


def _check_fields(obj: dict, required: dict, optional: dict, where: str) -> None:
    if not isinstance(obj, dict):
        raise ScenarioError("expected an object", where)
    for key in obj:
        if key not in required and key not in optional:
            raise ScenarioError(f"unknown field {key!r}", where)
    for key, types in required.items():
        if key not in obj:
            raise ScenarioError(f"missing field {key!r}", where)
        if not isinstance(obj[key], types) or isinstance(obj[key], bool):
            raise ScenarioError(f"field {key!r} has wrong type", where)
    for key, types in optional.items():
        if key in obj and (not isinstance(obj[key], types) or isinstance(obj[key], bool)):
            raise ScenarioError(f"field {key!r} has wrong type", where)


def topology_from_obj(obj: dict, where: str = "topology") -> Topology:
    """Build a Topology from an already-parsed topology section."""
    _check_fields(obj, {"nodes": list, "links": list}, {"description": str}, where)
    nodes = []
    for i, rec in enumerate(obj["nodes"]):
        _check_fields(rec, _NODE_FIELDS, {}, f"{where}.nodes[{i}]")
        nodes.append(Node(rec["id"], rec["kind"], rec["domain"]))
    links = []
    for i, rec in enumerate(obj["links"]):
        _check_fields(rec, _LINK_FIELDS, _LINK_OPTIONAL, f"{where}.links[{i}]")
        links.append(Link(rec["id"], rec["a"], rec["b"],
                          float(rec["capacity_mbps"]), float(rec["latency_ms"]),
                          rec["kind"], efficiency=rec.get("efficiency")))
    return Topology(nodes, links)


def load_topology(text: str) -> Topology:
    """Parse a topology from JSON text.

    Accepts either a bare topology object ``{"nodes": ..., "links": ...}``
    or a full scenario document with a ``topology`` section.
    """
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise ScenarioError(f"invalid JSON: {e.msg}",
                            f"line {e.lineno}, column {e.colno}") from None
    if not isinstance(doc, dict):
        raise ScenarioError("topology document must be a JSON object")
    if "topology" in doc and isinstance(doc["topology"], dict):
        return topology_from_obj(doc["topology"])
    return topology_from_obj(doc)


# ---------------------------------------------------------------------------
# Path search

def path_sort_key(t: Topology, path: Path, metric: str) -> tuple:
    """Sort key (metric total, total latency, link-id sequence)."""
    lat = sum(t.link(l).latency_ms for l in path.hops)
    if metric == "hops":
        m = float(len(path.hops))
    elif metric == "latency":
        m = lat
    else:
        raise ValueError(f"unknown metric {metric!r}")
    return (m, lat, path.hops)


def _edge_weight(link: Link, metric: str) -> float:
    return 1.0 if metric == "hops" else link.latency_ms


def _shortest(t: Topology, src: str, dst: str, metric: str,
              banned_nodes: frozenset[str] = frozenset(),
              banned_links: frozenset[str] = frozenset()) -> Path | None:
    """Minimum path under the composite order, or None if unreachable.

    Uniform-cost search over simple paths; the key strictly grows along
    any extension, so the first pop of dst is the global minimum.
    """
    start = (0.0, 0.0, (), src)
    heap = [start]
    settled: set[str] = set()
    while heap:
        m, lat, hops, here = heapq.heappop(heap)
        if here in settled:
            continue
        settled.add(here)
        if here == dst:
            return Path(src, dst, hops)
        for link in t.links_at(here):
            if link.id in banned_links:
                continue
            peer = link.other_end(here)
            if peer in settled or peer in banned_nodes:
                continue
            heapq.heappush(heap, (m + _edge_weight(link, metric),
                                  lat + link.latency_ms, hops + (link.id,), peer))
    return None


def k_shortest_paths(t: Topology, src: str, dst: str, k: int, metric: str = "hops",
                     exclude_links: frozenset[str] = frozenset()) -> list[Path]:
    """Up to k loop-free paths, ordered by (metric, latency, link ids).

    Yen's algorithm with an exact shortest-path subroutine.  The
    composite key is a strict total order over distinct simple paths,
    so the result equals exhaustive enumeration sorted by the same key
    and truncated to k.
    """
    t.node(src), t.node(dst)
    if src == dst:
        raise InvalidPathError("src and dst must differ")
    if k < 1:
        raise ValueError("k must be positive")
    first = _shortest(t, src, dst, metric, banned_links=exclude_links)
    if first is None:
        return []
    accepted = [first]
    candidates: dict[tuple[str, ...], Path] = {}
    while len(accepted) < k:
        prev = accepted[-1]
        prev_nodes = prev.node_sequence(t)
        for i in range(len(prev.hops)):
            spur_node = prev_nodes[i]
            root = prev.hops[:i]
            banned_links = set(exclude_links)
            for p in accepted:
                if p.hops[:i] == root and len(p.hops) > i:
                    banned_links.add(p.hops[i])
            banned_nodes = frozenset(prev_nodes[:i])
            spur = _shortest(t, spur_node, dst, metric,
                             banned_nodes=banned_nodes,
                             banned_links=frozenset(banned_links))
            if spur is None:
                continue
            hops = root + spur.hops
            if hops not in candidates and all(p.hops != hops for p in accepted):
                candidates[hops] = Path(src, dst, hops)
        if not candidates:
            break
        best = min(candidates.values(), key=lambda p: path_sort_key(t, p, metric))
        del candidates[best.hops]
        accepted.append(best)
    return accepted


def max_disjoint_paths(t: Topology, src: str, dst: str,
                       exclude_links: frozenset[str] = frozenset()) -> list[Path]:
    """Greedy link-disjoint paths: repeatedly extract the shortest path
    (hops metric) and remove its links.  Ordering is extraction order."""
    t.node(src), t.node(dst)
    if src == dst:
        raise InvalidPathError("src and dst must differ")
    used: set[str] = set(exclude_links)
    paths: list[Path] = []
    while True:
        p = _shortest(t, src, dst, "hops", banned_links=frozenset(used))
        if p is None:
            return paths
        paths.append(p)
        used.update(p.hops)


def path_metrics(t: Topology, p: Path) -> PathMetrics:
    """Bottleneck capacity (min, nominal), latency sum, and hop count."""
    p.validate(t)
    links = [t.link(l) for l in p.hops]
    return PathMetrics(
        bottleneck_mbps=min(l.capacity_mbps for l in links),
        total_latency_ms=sum(l.latency_ms for l in links),
        hop_count=len(links),
    )
