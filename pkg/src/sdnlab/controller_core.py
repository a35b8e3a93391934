"""Controller contract: events in, directives out.

Controllers are pure state machines over (topology, config, event
history); replaying a logged event stream against a fresh instance
reproduces the directive stream byte for byte.  The network monitor
lives here too: it turns simulator state into smoothed link_stats
events so controllers never peek at live simulator internals.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

from .dataplane import (
    FlowEntry,
    HeaderTuple,
    MatchPattern,
    Output,
    SetField,
    Drop,
    format_ip4,
    ip4,
)
from .errors import InvalidPathError
from .topo import Path, Topology, k_shortest_paths

PATH_PRIORITY = 100
MONITOR_ALPHA = 0.5


# ---------------------------------------------------------------------------
# Events and directives

@dataclass(frozen=True)
class PacketIn:
    switch: str
    port: int
    header: HeaderTuple
    flow_id: str


@dataclass(frozen=True)
class LinkStats:
    """Smoothed per-link usage sample.

    A downed link reports used == residual == 0, which no live link can
    produce (an idle link has residual == full effective capacity), so
    controllers can detect failures from the stats stream alone.
    """

    link: str
    used_mbps: float
    residual_mbps: float
    rtt_ms: float

    def is_down(self) -> bool:
        return self.used_mbps == 0.0 and self.residual_mbps == 0.0


@dataclass(frozen=True)
class FlowEnded:
    flow_id: str


@dataclass(frozen=True)
class EpochTick:
    epoch: int


ControllerEvent = PacketIn | LinkStats | FlowEnded | EpochTick


@dataclass(frozen=True)
class Install:
    switch: str
    entry: FlowEntry


@dataclass(frozen=True)
class Remove:
    switch: str
    cookie: str


@dataclass(frozen=True)
class RouteFlow:
    flow_id: str
    path: Path


Directive = Install | Remove | RouteFlow


# ---------------------------------------------------------------------------
# Host addressing known to controllers (the host-tracking analog)

@dataclass(frozen=True)
class HostAddress:
    host: str
    ip: int
    mac: int
    switch: str
    port: int


class AddressBook:
    def __init__(self, entries: list[HostAddress]):
        self._by_host = {e.host: e for e in entries}
        self._by_ip = {e.ip: e for e in entries}

    def of_host(self, host: str) -> HostAddress:
        return self._by_host[host]

    def host_of_ip(self, ip: int) -> HostAddress | None:
        return self._by_ip.get(ip)

    def hosts(self) -> list[str]:
        return sorted(self._by_host)


@dataclass(frozen=True)
class ControllerConfig:
    addresses: AddressBook
    declarations: tuple = ()
    transfers: tuple = ()
    settings: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# Shared rule-laying primitive

def install_path(t: Topology, p: Path, m: MatchPattern, owner: str,
                 cookie: str | None = None,
                 priority: int = PATH_PRIORITY) -> list[Directive]:
    """One install per switch on the path, each outputting toward the
    next hop; the final switch outputs to the destination host port."""
    p.validate(t)
    if not t.is_host(p.dst):
        raise InvalidPathError(f"path must terminate at a host, got {p.dst!r}")
    if cookie is None:
        cookie = "m:" + ",".join(
            f"{k}={v}" for k, v in sorted(m.specified_fields().items()))
    directives: list[Directive] = []
    nodes = p.node_sequence(t)
    for i, node in enumerate(nodes[:-1]):
        if t.is_host(node):
            continue
        port = t.port_of(node, p.hops[i])
        entry = FlowEntry(priority, m, (Output(port),), cookie=cookie, owner=owner)
        directives.append(Install(node, entry))
    return directives


# ---------------------------------------------------------------------------
# Network monitor

class Monitor:
    """EWMA smoothing of per-link usage; one link_stats per link per epoch.

    The smoother initializes to the first observation and resets across
    link failure or restore, so smoothed values always lie within the
    min/max of the samples they summarize.
    """

    def __init__(self, topology: Topology, alpha: float = MONITOR_ALPHA):
        self.topology = topology
        self.alpha = alpha
        self._smoothed: dict[str, float] = {}

    def sample(self, used_by_link: dict[str, float],
               link_up: frozenset[str]) -> list[LinkStats]:
        events = []
        for link in sorted(self.topology.links, key=lambda l: l.id):
            if link.id not in link_up:
                self._smoothed.pop(link.id, None)
                events.append(LinkStats(link.id, 0.0, 0.0, 2 * link.latency_ms))
                continue
            raw = used_by_link.get(link.id, 0.0)
            prev = self._smoothed.get(link.id)
            smoothed = raw if prev is None else self.alpha * raw + (1 - self.alpha) * prev
            self._smoothed[link.id] = smoothed
            residual = max(link.effective_capacity_mbps - smoothed, 0.0)
            events.append(LinkStats(link.id, smoothed, residual, 2 * link.latency_ms))
        return events


# ---------------------------------------------------------------------------
# Controllers

@dataclass
class FlowRecord:
    flow_id: str
    header: HeaderTuple
    src: str
    dst: str
    path: Path | None = None
    generation: int = 0
    installed: list = field(default_factory=list)  # [(switch, cookie)]


class Controller:
    name = "abstract"

    def __init__(self, topology: Topology, config: ControllerConfig):
        self.topology = topology
        self.config = config

    def handle_event(self, event: ControllerEvent) -> list[Directive]:
        raise NotImplementedError


class BaselineController(Controller):
    """Hop-count shortest-path routing, the comparison anchor.

    Routes each new flow on the single shortest path, cleans up when
    flows end, and re-routes flows whose path lost a link (fail-over to
    the best surviving path, e.g. a tunnel alternative).
    """

    name = "baseline"
    owner = "root"

    def __init__(self, topology: Topology, config: ControllerConfig):
        super().__init__(topology, config)
        self.flows: dict[str, FlowRecord] = {}
        self.down: set[str] = set()
        self.stats: dict[str, LinkStats] = {}

    # -- event dispatch

    def handle_event(self, event: ControllerEvent) -> list[Directive]:
        if isinstance(event, PacketIn):
            return self.on_packet_in(event)
        if isinstance(event, LinkStats):
            self.on_link_stats(event)
            return []
        if isinstance(event, FlowEnded):
            return self.on_flow_ended(event)
        if isinstance(event, EpochTick):
            return self.on_epoch_tick(event)
        raise TypeError(f"unknown event {event!r}")

    def on_link_stats(self, ev: LinkStats) -> None:
        self.stats[ev.link] = ev
        if ev.is_down():
            self.down.add(ev.link)
        else:
            self.down.discard(ev.link)

    def on_packet_in(self, ev: PacketIn) -> list[Directive]:
        if ev.flow_id in self.flows:
            return []
        rec = self.admit(ev)
        if rec is None:
            return []
        self.flows[ev.flow_id] = rec
        return self.route_flow(rec)

    def admit(self, ev: PacketIn) -> FlowRecord | None:
        """Resolve flow endpoints from the ingress port and address book."""
        link = self.topology.link_at_port(ev.switch, ev.port)
        src = link.other_end(ev.switch)
        if not self.topology.is_host(src):
            return None
        dst_addr = self.config.addresses.host_of_ip(ev.header.ip_dst)
        if dst_addr is None:
            return None
        return FlowRecord(ev.flow_id, ev.header, src, dst_addr.host)

    def on_flow_ended(self, ev: FlowEnded) -> list[Directive]:
        rec = self.flows.pop(ev.flow_id, None)
        if rec is None:
            return []
        return [Remove(switch, cookie) for switch, cookie in rec.installed]

    def on_epoch_tick(self, ev: EpochTick) -> list[Directive]:
        directives: list[Directive] = []
        for flow_id in sorted(self.flows):
            rec = self.flows[flow_id]
            if rec.path is None:
                directives.extend(self.route_flow(rec))
            elif any(h in self.down for h in rec.path.hops):
                directives.extend(self.route_flow(rec))
        return directives

    # -- routing

    def select_route(self, rec: FlowRecord) -> Path | None:
        found = k_shortest_paths(self.topology, rec.src, rec.dst, 1, "hops",
                                 exclude_links=frozenset(self.down))
        return found[0] if found else None

    def route_flow(self, rec: FlowRecord) -> list[Directive]:
        path = self.select_route(rec)
        directives: list[Directive] = [Remove(s, c) for s, c in rec.installed]
        rec.installed = []
        if path is None:
            rec.path = None
            return directives
        rec.generation += 1
        cookie = f"f:{rec.flow_id}:g{rec.generation}"
        match = MatchPattern.five_tuple(rec.header)
        installs = install_path(self.topology, path, match, self.owner, cookie)
        rec.installed = [(d.switch, cookie) for d in installs]
        rec.path = path
        directives.extend(installs)
        directives.append(RouteFlow(rec.flow_id, path))
        return directives


# ---------------------------------------------------------------------------
# Stable serialization for logs and replay

def header_to_obj(h: HeaderTuple) -> dict:
    return {
        "in_port": h.in_port,
        "eth_src": h.eth_src,
        "eth_dst": h.eth_dst,
        "ip_src": format_ip4(h.ip_src),
        "ip_dst": format_ip4(h.ip_dst),
        "ip_proto": h.ip_proto,
        "tp_src": h.tp_src,
        "tp_dst": h.tp_dst,
        "tcp_options": sorted(h.tcp_options),
    }


def header_from_obj(obj: dict) -> HeaderTuple:
    return HeaderTuple(
        in_port=obj["in_port"],
        eth_src=obj["eth_src"],
        eth_dst=obj["eth_dst"],
        ip_src=ip4(obj["ip_src"]),
        ip_dst=ip4(obj["ip_dst"]),
        ip_proto=obj["ip_proto"],
        tp_src=obj["tp_src"],
        tp_dst=obj["tp_dst"],
        tcp_options=frozenset(obj["tcp_options"]),
    )


def match_to_obj(m: MatchPattern) -> dict:
    obj = {}
    for name, value in sorted(m.specified_fields().items()):
        if name in ("ip_src", "ip_dst"):
            obj[name] = format_ip4(value)
        elif name == "tcp_options":
            obj[name] = sorted(value)
        else:
            obj[name] = value
    return obj


def _action_to_obj(a) -> dict:
    if isinstance(a, Output):
        return {"output": a.port}
    if isinstance(a, SetField):
        value = format_ip4(a.value) if a.field in ("ip_src", "ip_dst") else a.value
        return {"set": a.field, "value": value}
    if isinstance(a, Drop):
        return {"drop": True}
    raise TypeError(f"unknown action {a!r}")


def path_to_obj(p: Path) -> dict:
    return {"src": p.src, "dst": p.dst, "hops": list(p.hops)}


def path_from_obj(obj: dict) -> Path:
    return Path(obj["src"], obj["dst"], tuple(obj["hops"]))


def event_to_obj(e: ControllerEvent) -> dict:
    if isinstance(e, PacketIn):
        return {"kind": "packet_in", "switch": e.switch, "port": e.port,
                "flow": e.flow_id, "header": header_to_obj(e.header)}
    if isinstance(e, LinkStats):
        return {"kind": "link_stats", "link": e.link, "used_mbps": e.used_mbps,
                "residual_mbps": e.residual_mbps, "rtt_ms": e.rtt_ms}
    if isinstance(e, FlowEnded):
        return {"kind": "flow_ended", "flow": e.flow_id}
    if isinstance(e, EpochTick):
        return {"kind": "epoch_tick", "epoch": e.epoch}
    raise TypeError(f"unknown event {e!r}")


def event_from_obj(obj: dict) -> ControllerEvent:
    kind = obj["kind"]
    if kind == "packet_in":
        return PacketIn(obj["switch"], obj["port"],
                        header_from_obj(obj["header"]), obj["flow"])
    if kind == "link_stats":
        return LinkStats(obj["link"], obj["used_mbps"],
                         obj["residual_mbps"], obj["rtt_ms"])
    if kind == "flow_ended":
        return FlowEnded(obj["flow"])
    if kind == "epoch_tick":
        return EpochTick(obj["epoch"])
    raise ValueError(f"unknown event kind {kind!r}")


def directive_to_obj(d: Directive) -> dict:
    if isinstance(d, Install):
        return {"kind": "install", "switch": d.switch,
                "entry": {"priority": d.entry.priority, "owner": d.entry.owner,
                          "cookie": d.entry.cookie,
                          "match": match_to_obj(d.entry.match),
                          "actions": [_action_to_obj(a) for a in d.entry.actions]}}
    if isinstance(d, Remove):
        return {"kind": "remove", "switch": d.switch, "cookie": d.cookie}
    if isinstance(d, RouteFlow):
        return {"kind": "route_flow", "flow": d.flow_id, "path": path_to_obj(d.path)}
    raise TypeError(f"unknown directive {d!r}")
