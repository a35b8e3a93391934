"""Multipath controllers.

Two styles, matching the two ways bulk traffic is spread over a fabric:

* advance path assignment: a transfer asks the controller for up to K
  link-disjoint paths before it starts, and its parallel streams are
  striped round-robin across them;
* MPTCP path sets: the first subflow of an MPTCP instance (MP_CAPABLE)
  builds a topologically ranked path set and each later subflow
  (MP_JOIN) takes the next path in the set, wrapping when exhausted.

Both controllers sit on the baseline controller's bookkeeping, so flows
that are neither striped nor MPTCP are routed exactly as the baseline
would route them.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .controller_core import (
    AddressBook,
    BaselineController,
    ControllerConfig,
    Directive,
    FlowRecord,
    PacketIn,
)
from .dataplane import MP_CAPABLE, MP_JOIN, HeaderTuple
from .errors import InvalidPathError, SdnLabError
from .topo import Path, Topology, k_shortest_paths, max_disjoint_paths

PATH_SET_K = 8


@dataclass(frozen=True)
class TransferRequest:
    """Advance request: stripe n_streams parallel streams over up to
    requested_paths link-disjoint paths.  stream_flow_ids names the
    streams in order so the controller can recognize them."""

    id: str
    src: str
    dst: str
    n_streams: int
    requested_paths: int
    stream_flow_ids: tuple[str, ...] = ()

    def __post_init__(self):
        if self.n_streams < 1:
            raise ValueError("n_streams must be >= 1")
        if self.requested_paths < 1:
            raise ValueError("requested_paths must be >= 1")


@dataclass
class PathSet:
    """Ordered candidate paths with a cursor for the next hand-out."""

    owner: str
    paths: tuple[Path, ...]
    cursor: int = 0

    def __post_init__(self):
        if not self.paths:
            raise ValueError("path set must not be empty")

    def next_path(self) -> Path:
        p = self.paths[self.cursor % len(self.paths)]
        self.cursor += 1
        return p


@dataclass
class MptcpInstance:
    token: str  # canonical five-tuple of the MP_CAPABLE subflow
    src: str
    dst: str
    subflows: list[tuple[tuple, Path]] = field(default_factory=list)


def request_paths(t: Topology, r: TransferRequest,
                  exclude_links: frozenset[str] = frozenset()) -> list[Path]:
    """Up to requested_paths link-disjoint paths, in extraction order."""
    paths = max_disjoint_paths(t, r.src, r.dst, exclude_links)
    if not paths:
        raise InvalidPathError(f"no path from {r.src!r} to {r.dst!r}")
    return paths[:r.requested_paths]


def assign_stream(paths: list[Path], stream_index: int) -> Path:
    """Round-robin distribution of stream stream_index over the paths."""
    if not paths:
        raise InvalidPathError("transfer has no assigned paths")
    return paths[stream_index % len(paths)]


def build_path_set(t: Topology, src: str, dst: str, owner: str,
                   k: int = PATH_SET_K,
                   exclude_links: frozenset[str] = frozenset()) -> PathSet:
    """Topologically ranked path set: (hop count, latency, link ids)."""
    paths = k_shortest_paths(t, src, dst, k, "hops", exclude_links=exclude_links)
    if not paths:
        raise InvalidPathError(f"no path from {src!r} to {dst!r}")
    return PathSet(owner, tuple(paths))


def _token(h: HeaderTuple) -> str:
    return f"{h.ip_src}-{h.ip_dst}-{h.ip_proto}-{h.tp_src}-{h.tp_dst}"


class MptcpBook:
    """Pure MPTCP state: instances keyed by the capable subflow's
    five-tuple, joined by (src ip, dst ip, proto)."""

    def __init__(self, topology: Topology, addresses: AddressBook,
                 k: int = PATH_SET_K):
        self.topology = topology
        self.addresses = addresses
        self.k = k
        self.instances: dict[str, MptcpInstance] = {}
        self.sets: dict[str, PathSet] = {}
        self._by_pair: dict[tuple[int, int, int], str] = {}

    def _hosts_of(self, h: HeaderTuple) -> tuple[str, str]:
        src = self.addresses.host_of_ip(h.ip_src)
        dst = self.addresses.host_of_ip(h.ip_dst)
        if src is None or dst is None:
            raise SdnLabError("cannot resolve MPTCP endpoints from header")
        return src.host, dst.host

    def on_mp_capable(self, h: HeaderTuple,
                      exclude_links: frozenset[str] = frozenset()
                      ) -> tuple[MptcpInstance, PathSet]:
        if MP_CAPABLE not in h.tcp_options:
            raise ValueError("header lacks the mp_capable option")
        token = _token(h)
        if token in self.instances:
            return self.instances[token], self.sets[token]
        src, dst = self._hosts_of(h)
        path_set = build_path_set(self.topology, src, dst, owner=token,
                                  k=self.k, exclude_links=exclude_links)
        inst = MptcpInstance(token, src, dst)
        first = path_set.next_path()
        inst.subflows.append((h.five_tuple(), first))
        self.instances[token] = inst
        self.sets[token] = path_set
        self._by_pair[(h.ip_src, h.ip_dst, h.ip_proto)] = token
        return inst, path_set

    def instance_for_join(self, h: HeaderTuple) -> MptcpInstance | None:
        token = self._by_pair.get((h.ip_src, h.ip_dst, h.ip_proto))
        return self.instances.get(token) if token is not None else None

    def on_mp_join(self, h: HeaderTuple) -> Path:
        if MP_JOIN not in h.tcp_options:
            raise ValueError("header lacks the mp_join option")
        inst = self.instance_for_join(h)
        if inst is None:
            raise SdnLabError("mp_join matches no MPTCP instance")
        path = self.sets[inst.token].next_path()
        inst.subflows.append((h.five_tuple(), path))
        return path

    def forget(self, token: str) -> None:
        inst = self.instances.pop(token, None)
        self.sets.pop(token, None)
        if inst is not None:
            self._by_pair = {k: v for k, v in self._by_pair.items() if v != token}


class MptcpController(BaselineController):
    """Routes MPTCP subflows over their instance's path set; all other
    traffic goes through the plain baseline logic, directive for
    directive."""

    name = "mptcp"

    def __init__(self, topology: Topology, config: ControllerConfig):
        super().__init__(topology, config)
        self.book = MptcpBook(topology, config.addresses,
                              k=int(config.settings.get("path_set_k", PATH_SET_K)))
        self.assigned: dict[str, Path] = {}
        self.flow_token: dict[str, str] = {}

    def on_packet_in(self, ev: PacketIn) -> list[Directive]:
        h = ev.header
        if ev.flow_id not in self.flows:
            if MP_CAPABLE in h.tcp_options:
                inst, _pset = self.book.on_mp_capable(
                    h, exclude_links=frozenset(self.down))
                self.assigned[ev.flow_id] = inst.subflows[-1][1]
                self.flow_token[ev.flow_id] = inst.token
            elif MP_JOIN in h.tcp_options:
                if self.book.instance_for_join(h) is not None:
                    path = self.book.on_mp_join(h)
                    self.assigned[ev.flow_id] = path
                    self.flow_token[ev.flow_id] = \
                        self.book.instance_for_join(h).token
        return super().on_packet_in(ev)

    def select_route(self, rec: FlowRecord) -> Path | None:
        path = self.assigned.get(rec.flow_id)
        if path is not None:
            if all(h not in self.down for h in path.hops):
                return path
            path = self._next_up_path(rec.flow_id)
            if path is not None:
                self.assigned[rec.flow_id] = path
                return path
        return super().select_route(rec)

    def _next_up_path(self, flow_id: str) -> Path | None:
        token = self.flow_token.get(flow_id)
        if token is None or token not in self.book.sets:
            return None
        pset = self.book.sets[token]
        for _ in range(len(pset.paths)):
            p = pset.next_path()
            if all(h not in self.down for h in p.hops):
                return p
        return None

    def on_flow_ended(self, ev) -> list[Directive]:
        directives = super().on_flow_ended(ev)
        self.assigned.pop(ev.flow_id, None)
        token = self.flow_token.pop(ev.flow_id, None)
        if token is not None and token not in self.flow_token.values():
            self.book.forget(token)
        return directives


class StripingController(BaselineController):
    """Advance path assignment for declared transfers; their streams are
    striped round-robin over link-disjoint paths computed up front."""

    name = "striping"

    def __init__(self, topology: Topology, config: ControllerConfig):
        super().__init__(topology, config)
        self.transfer_paths: dict[str, list[Path]] = {}
        self.stream_of_flow: dict[str, tuple[str, int]] = {}
        for request in config.transfers:
            self.transfer_paths[request.id] = request_paths(topology, request)
            for index, fid in enumerate(request.stream_flow_ids):
                self.stream_of_flow[fid] = (request.id, index)

    def select_route(self, rec: FlowRecord) -> Path | None:
        stream = self.stream_of_flow.get(rec.flow_id)
        if stream is not None:
            transfer_id, index = stream
            path = assign_stream(self.transfer_paths[transfer_id], index)
            if all(h not in self.down for h in path.hops):
                return path
        return super().select_route(rec)
