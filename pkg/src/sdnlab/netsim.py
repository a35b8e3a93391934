"""Deterministic fluid-flow traffic simulator.

Per epoch the simulator applies scenario events, lets the controller
react (one event at a time, directives applied immediately), then
recomputes the steady-state max-min fair allocation.  There is no
packet-level TCP model; per-stream caps and per-link efficiency factors
stand in for transport and framing effects.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

from .controller_core import (
    Controller,
    Directive,
    EpochTick,
    FlowEnded,
    Install,
    LinkStats,
    Monitor,
    PacketIn,
    Remove,
    RouteFlow,
)
from .dataplane import HeaderTuple, SwitchTable
from .errors import (
    DirectiveError,
    InvalidPathError,
    SimulationError,
    UnroutedFlowError,
)
from .topo import Path, Topology

EVENT_KINDS = frozenset({"flow_start", "flow_stop", "link_fail", "link_restore"})
_FREEZE_TOL = 1e-9


@dataclass
class TrafficFlow:
    """One TCP stream (or fluid demand) placed on a controller-assigned path."""

    id: str
    src: str
    dst: str
    path: Path | None = None
    per_stream_cap_mbps: float | None = None
    class_hint: str | None = None
    header: HeaderTuple | None = None
    slice_id: str | None = None
    transfer: tuple | None = None  # (transfer_id, stream_index)

    def __post_init__(self):
        if self.per_stream_cap_mbps is not None and not self.per_stream_cap_mbps > 0:
            raise ValueError("per_stream_cap_mbps must be positive when finite")


@dataclass(frozen=True)
class SimEvent:
    at_epoch: int
    kind: str
    subject: str | None = None
    flow: TrafficFlow | None = None

    def __post_init__(self):
        if self.at_epoch < 0:
            raise ValueError("at_epoch must be non-negative")
        if self.kind not in EVENT_KINDS:
            raise ValueError(f"unknown event kind {self.kind!r}")
        if self.kind == "flow_start" and self.flow is None:
            raise ValueError("flow_start requires a flow")
        if self.kind != "flow_start" and self.subject is None:
            raise ValueError(f"{self.kind} requires a subject id")


@dataclass(frozen=True)
class EpochAllocation:
    epoch: int
    rates: dict[str, float]
    paths: dict[str, Path | None]

    def aggregate_mbps(self) -> float:
        return sum(self.rates.values())


def allocate_max_min(t: Topology, flows: list[TrafficFlow]) -> dict[str, float]:
    """Progressive-filling max-min fair rates.

    All unfrozen flows rise together by the largest uniform increment
    the network allows; flows freeze when a traversed directed link
    saturates or their own cap is reached.  Capacity is per direction.
    """
    flow_links: dict[str, list[tuple[str, int]]] = {}
    for f in flows:
        if f.path is None:
            raise UnroutedFlowError(f"flow {f.id!r} has no path")
        keys = []
        for lid, frm, _to in f.path.directed_hops(t):
            keys.append((lid, 0 if frm == t.link(lid).a else 1))
        flow_links[f.id] = keys

    residual: dict[tuple[str, int], float] = {}
    for keys in flow_links.values():
        for key in keys:
            if key not in residual:
                residual[key] = t.link(key[0]).effective_capacity_mbps

    rates = {f.id: 0.0 for f in flows}
    caps = {f.id: (f.per_stream_cap_mbps if f.per_stream_cap_mbps is not None
                   else math.inf) for f in flows}
    active = sorted(rates)
    while active:
        load: dict[tuple[str, int], int] = {}
        for fid in active:
            for key in flow_links[fid]:
                load[key] = load.get(key, 0) + 1
        delta = min(residual[key] / n for key, n in load.items())
        delta = min([delta] + [caps[fid] - rates[fid] for fid in active])
        delta = max(delta, 0.0)
        for fid in active:
            rates[fid] += delta
            for key in flow_links[fid]:
                residual[key] -= delta
        still = []
        for fid in active:
            if rates[fid] >= caps[fid] - _FREEZE_TOL:
                continue
            if any(residual[key] <= _FREEZE_TOL for key in flow_links[fid]):
                continue
            still.append(fid)
        if len(still) == len(active):  # numeric stall guard
            break
        active = still
    return rates


def flow_rtt_ms(t: Topology, p: Path) -> float:
    """Round-trip time: twice the one-way latency sum."""
    p.validate(t)
    return 2.0 * sum(t.link(l).latency_ms for l in p.hops)


class Simulation:
    """Owns all mutable state of one run; single-threaded and deterministic.

    ``event_tap`` and ``directive_tap`` receive (epoch, event) and
    (epoch, directive) for logging; ``epoch_hook`` runs after each
    allocation with the simulation itself, for audits.
    """

    def __init__(self, topology: Topology, events: list[SimEvent],
                 controller: Controller, epochs: int,
                 event_tap=None, directive_tap=None, epoch_hook=None):
        if epochs < 1:
            raise ValueError("epochs must be >= 1")
        for earlier, later in zip(events, events[1:]):
            if later.at_epoch < earlier.at_epoch:
                raise SimulationError("events must be sorted by epoch")
        self.topology = topology
        self.events = list(events)
        self.controller = controller
        self.epochs = epochs
        self.event_tap = event_tap
        self.directive_tap = directive_tap
        self.epoch_hook = epoch_hook
        self.tables: dict[str, SwitchTable] = {
            n.id: SwitchTable(n.id) for n in topology.nodes if n.kind == "switch"}
        self.link_up: set[str] = {l.id for l in topology.links}
        self.flows: dict[str, TrafficFlow] = {}
        self.monitor = Monitor(topology)
        self.epoch = 0
        self._event_idx = 0
        self._seen_flow_ids: set[str] = set()
        self._used_by_link: dict[str, float] = {}

    # -- flow plumbing

    def attachment(self, host: str) -> tuple[str, int]:
        """(switch, port) where a single-homed host connects."""
        links = self.topology.links_at(host)
        if len(links) != 1:
            raise SimulationError(f"host {host!r} must have exactly one link")
        link = links[0]
        switch = link.other_end(host)
        if self.topology.is_host(switch):
            raise SimulationError(f"host {host!r} attaches to another host")
        return switch, self.topology.port_of(switch, link.id)

    def _start_flow(self, flow: TrafficFlow) -> None:
        if flow.id in self._seen_flow_ids:
            raise SimulationError(f"duplicate flow id {flow.id!r}")
        for end in (flow.src, flow.dst):
            if not self.topology.is_host(end):
                raise SimulationError(f"flow {flow.id!r} endpoint {end!r} is not a host")
        if flow.src == flow.dst:
            raise SimulationError(f"flow {flow.id!r} has identical endpoints")
        self.attachment(flow.src), self.attachment(flow.dst)
        self._seen_flow_ids.add(flow.id)
        self.flows[flow.id] = flow

    def path_is_up(self, p: Path) -> bool:
        return all(h in self.link_up for h in p.hops)

    # -- controller dispatch

    def _dispatch(self, event) -> None:
        if self.event_tap:
            self.event_tap(self.epoch, event)
        for directive in self.controller.handle_event(event):
            if self.directive_tap:
                self.directive_tap(self.epoch, directive)
            self._apply(directive)

    def _apply(self, d: Directive) -> None:
        if isinstance(d, Install):
            table = self.tables.get(d.switch)
            if table is None:
                raise DirectiveError(f"install references unknown switch {d.switch!r}")
            table.install(d.entry)
        elif isinstance(d, Remove):
            table = self.tables.get(d.switch)
            if table is None:
                raise DirectiveError(f"remove references unknown switch {d.switch!r}")
            table.remove_cookie(d.cookie)
        elif isinstance(d, RouteFlow):
            flow = self.flows.get(d.flow_id)
            if flow is None:
                raise DirectiveError(f"route_flow references unknown flow {d.flow_id!r}")
            try:
                d.path.validate(self.topology)
            except InvalidPathError as e:
                raise DirectiveError(f"route_flow for {d.flow_id!r}: {e}") from None
            if d.path.src != flow.src or d.path.dst != flow.dst:
                raise DirectiveError(
                    f"route_flow path endpoints do not match flow {d.flow_id!r}")
            down = [h for h in d.path.hops if h not in self.link_up]
            if down:
                raise DirectiveError(
                    f"route_flow for {d.flow_id!r} uses downed link {down[0]!r}")
            flow.path = d.path
        else:
            raise DirectiveError(f"unknown directive {d!r}")

    # -- epoch loop

    def step(self) -> EpochAllocation:
        epoch = self.epoch
        ended: list[str] = []
        started: list[TrafficFlow] = []
        while (self._event_idx < len(self.events)
               and self.events[self._event_idx].at_epoch == epoch):
            ev = self.events[self._event_idx]
            self._event_idx += 1
            if ev.kind == "flow_start":
                self._start_flow(ev.flow)
                started.append(ev.flow)
            elif ev.kind == "flow_stop":
                if ev.subject not in self.flows:
                    raise SimulationError(f"flow_stop for unknown flow {ev.subject!r}")
                del self.flows[ev.subject]
                ended.append(ev.subject)
            elif ev.kind == "link_fail":
                self.topology.link(ev.subject)
                self.link_up.discard(ev.subject)
            elif ev.kind == "link_restore":
                self.topology.link(ev.subject)
                self.link_up.add(ev.subject)

        for fid in ended:
            self._dispatch(FlowEnded(fid))
        for stats in self.monitor.sample(self._used_by_link, frozenset(self.link_up)):
            self._dispatch(stats)
        for flow in started:
            switch, port = self.attachment(flow.src)
            header = flow.header if flow.header is not None else HeaderTuple()
            header = header.with_field("in_port", port)
            self._dispatch(PacketIn(switch, port, header, flow.id))
        self._dispatch(EpochTick(epoch))

        routable = [f for f in self.flows.values()
                    if f.path is not None and self.path_is_up(f.path)]
        rates = allocate_max_min(self.topology, routable)
        full = {fid: rates.get(fid, 0.0) for fid in sorted(self.flows)}
        paths = {fid: self.flows[fid].path for fid in sorted(self.flows)}
        self._used_by_link = _per_link_usage(self.topology, routable, rates)
        record = EpochAllocation(epoch, full, paths)
        self.epoch += 1
        if self.epoch_hook:
            self.epoch_hook(self, record)
        return record

    def run(self) -> list[EpochAllocation]:
        return [self.step() for _ in range(self.epochs)]


def _per_link_usage(t: Topology, flows: list[TrafficFlow],
                    rates: dict[str, float]) -> dict[str, float]:
    """Per-link usage reported to the monitor: the busier direction."""
    directed: dict[tuple[str, int], float] = {}
    for f in flows:
        rate = rates.get(f.id, 0.0)
        for lid, frm, _to in f.path.directed_hops(t):
            key = (lid, 0 if frm == t.link(lid).a else 1)
            directed[key] = directed.get(key, 0.0) + rate
    used: dict[str, float] = {}
    for (lid, _d), value in directed.items():
        used[lid] = max(used.get(lid, 0.0), value)
    return used


def run(t: Topology, events: list[SimEvent], controller: Controller,
        epochs: int) -> list[EpochAllocation]:
    """Convenience wrapper: build a Simulation and run it to completion."""
    return Simulation(t, events, controller, epochs).run()


# ---------------------------------------------------------------------------
# Metrics serialization (canonical CSV and its JSON mirror)

CSV_HEADER = "epoch,flow_id,rate_mbps,path"


def _path_text(p: Path | None) -> str:
    return ">".join(p.hops) if p is not None else "-"


def series_to_csv(series: list[EpochAllocation]) -> str:
    lines = [CSV_HEADER]
    for record in series:
        for fid in sorted(record.rates):
            lines.append(f"{record.epoch},{fid},{record.rates[fid]:.6f},"
                         f"{_path_text(record.paths.get(fid))}")
    return "\n".join(lines) + "\n"


def series_to_obj(series: list[EpochAllocation]) -> list[dict]:
    out = []
    for record in series:
        for fid in sorted(record.rates):
            path = record.paths.get(fid)
            out.append({"epoch": record.epoch, "flow_id": fid,
                        "rate_mbps": record.rates[fid],
                        "path": list(path.hops) if path else None})
    return out
