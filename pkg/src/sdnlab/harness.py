"""Command-line experiment runner.

Loads a scenario document, wires topology + controller (+ slices), runs
the simulator, audits forwarding behavior against the fluid allocation,
and emits metrics (CSV + JSON), a run report and a replayable log.

Exit codes: 0 success, 1 validation failure, 2 assertion or isolation
failure, 3 internal error.
"""

from __future__ import annotations

import argparse
import ipaddress
import json
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path as FsPath

from . import controller_core as cc
from .controller_core import (
    AddressBook,
    BaselineController,
    Controller,
    ControllerConfig,
    HostAddress,
)
from .dataplane import MatchPattern, HeaderTuple, forward, ip4
from .errors import DirectiveError, ScenarioError, SdnLabError
from .multipath import MptcpController, StripingController, TransferRequest
from .netsim import (
    EpochAllocation,
    SimEvent,
    Simulation,
    TrafficFlow,
    flow_rtt_ms,
    series_to_csv,
    series_to_obj,
)
from .overseer import FLOW_CLASSES, AppDeclaration, OverseerController
from .slicing import SliceFabric, SliceHost, SliceSpec
from .topo import Topology, topology_from_obj
from .topo import _check_fields  # shared strict field validation

LOG_VERSION = "1"
DEFAULT_HOST_IP_BASE = ip4("192.168.0.0")
DEFAULT_MAC_BASE = 0x020000000000
TP_SRC_BASE = 40000
DEFAULT_TP_DST = 5001
TRANSFER_TP_DST = 2811
RANDOM_TP_DST_CHOICES = (5001, 80, 22, 2811)

CONTROLLERS: dict[str, type[Controller]] = {
    "baseline": BaselineController,
    "overseer": OverseerController,
    "striping": StripingController,
    "mptcp": MptcpController,
}

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_ASSERTION = 2
EXIT_INTERNAL = 3


def scenarios_dir() -> FsPath:
    return FsPath(__file__).parent / "scenarios"


def resolve_scenario(name_or_path: str) -> FsPath:
    p = FsPath(name_or_path)
    if p.exists():
        return p
    for candidate in (name_or_path, name_or_path + ".json"):
        shipped = scenarios_dir() / candidate
        if shipped.exists():
            return shipped
    raise ScenarioError(f"scenario {name_or_path!r} not found")


# ---------------------------------------------------------------------------
# Scenario documents

@dataclass
class Scenario:
    name: str
    source: str
    topology: Topology
    slices: list[SliceSpec]
    controller: str
    epochs: int
    seed: int
    declarations: list[AppDeclaration]
    transfers: list[TransferRequest]
    events: list[SimEvent]
    flow_slice: dict[str, str | None]
    host_slice: dict[str, str]
    description: str | None = None


_ROOT_FIELDS = {"topology": (dict, str), "epochs": int, "events": list}
_ROOT_OPTIONAL = {"name": str, "description": str, "controller": str,
                  "seed": int, "slices": list, "declarations": list}

_FLOW_FIELDS = {"id": str, "src": str, "dst": str}
_FLOW_OPTIONAL = {"ip_src": str, "ip_dst": str, "tp_src": int, "tp_dst": int,
                  "ip_proto": int, "cap_mbps": (int, float), "class": str,
                  "slice": str, "tcp_options": list}

_EVENT_OPTIONAL_BY_KIND = {
    "flow_start": ({"flow": dict}, {}),
    "flow_stop": ({"subject": str}, {}),
    "link_fail": ({"subject": str}, {}),
    "link_restore": ({"subject": str}, {}),
    "transfer": ({"id": str, "src": str, "dst": str, "n_streams": int,
                  "paths": int},
                 {"cap_mbps": (int, float), "tp_dst": int, "slice": str}),
    "mptcp": ({"id": str, "src": str, "dst": str, "subflows": int},
              {"cap_mbps": (int, float), "tp_dst": int, "slice": str}),
    "random_traffic": ({"flows": int, "horizon": int},
                       {"slices": list, "hosts": list,
                        "min_duration": int, "max_duration": int,
                        "ports": list, "cap_mbps": (int, float)}),
}


class _ScenarioBuilder:
    """Expands a scenario document into concrete simulator inputs."""

    def __init__(self, obj: dict, name: str, source: str, base_dir: FsPath,
                 seed_override: int | None, epochs_override: int | None):
        _check_fields(obj, _ROOT_FIELDS, _ROOT_OPTIONAL, "scenario")
        self.obj = obj
        self.name = obj.get("name", name)
        self.source = source
        self.base_dir = base_dir
        self.seed = seed_override if seed_override is not None \
            else obj.get("seed", 0)
        self.epochs = epochs_override if epochs_override is not None \
            else obj["epochs"]
        if self.epochs < 1:
            raise ScenarioError("epochs must be >= 1")
        self.topology = self._load_topology(obj["topology"])
        self.slices = self._parse_slices(obj.get("slices", []))
        self.slice_by_id = {s.id: s for s in self.slices}
        if self.slices and "controller" in obj:
            raise ScenarioError(
                "sliced scenarios select controllers per slice, not at root")
        self.controller = obj.get("controller", "baseline")
        if not self.slices and self.controller not in CONTROLLERS:
            raise ScenarioError(f"unknown controller {self.controller!r}")
        self.hosts = sorted(n.id for n in self.topology.nodes if n.kind == "host")
        self.host_index = {h: i for i, h in enumerate(self.hosts)}
        self.host_slice: dict[str, str] = {}
        self.host_vip: dict[str, int] = {}
        for s in self.slices:
            for sh in s.hosts:
                self.host_slice[sh.host] = s.id
                self.host_vip[sh.host] = sh.ip
        import random as _random
        self.rng = _random.Random(self.seed)
        self.next_tp_src = TP_SRC_BASE
        self.flow_slice: dict[str, str | None] = {}
        self.transfers: list[TransferRequest] = []
        self.declarations = self._parse_declarations(obj.get("declarations", []))
        self.events = self._expand_events(obj["events"])

    # -- sections

    def _load_topology(self, section) -> Topology:
        if isinstance(section, str):
            path = (self.base_dir / section)
            if not path.exists():
                raise ScenarioError(f"topology file {section!r} not found",
                                    "topology")
            obj = _load_json_file(path)
            return topology_from_obj(obj, where=f"topology({section})")
        return topology_from_obj(section)

    def _parse_slices(self, records: list) -> list[SliceSpec]:
        slices = []
        for i, rec in enumerate(records):
            where = f"slices[{i}]"
            _check_fields(rec, {"id": str, "virtual_prefixes": list},
                          {"controller": str, "hosts": list}, where)
            prefixes = []
            for text in rec["virtual_prefixes"]:
                try:
                    prefixes.append(ipaddress.IPv4Network(text))
                except ValueError as e:
                    raise ScenarioError(str(e), where) from None
            hosts = []
            for j, hrec in enumerate(rec.get("hosts", [])):
                _check_fields(hrec, {"host": str, "ip": str}, {},
                              f"{where}.hosts[{j}]")
                hosts.append(SliceHost(hrec["host"], ip4(hrec["ip"])))
            controller = rec.get("controller", "baseline")
            if controller not in CONTROLLERS:
                raise ScenarioError(f"unknown controller {controller!r}", where)
            slices.append(SliceSpec(rec["id"], tuple(prefixes), controller,
                                    tuple(hosts)))
        if len({s.id for s in slices}) != len(slices):
            raise ScenarioError("duplicate slice ids")
        return slices

    def _parse_declarations(self, records: list) -> list[AppDeclaration]:
        decls = []
        for i, rec in enumerate(records):
            where = f"declarations[{i}]"
            _check_fields(rec, {"class": str, "match": dict},
                          {"at_epoch": int}, where)
            if rec["class"] not in FLOW_CLASSES:
                raise ScenarioError(f"unknown flow class {rec['class']!r}", where)
            decls.append(AppDeclaration(parse_match(rec["match"], where),
                                        rec["class"], rec.get("at_epoch", 0)))
        return decls

    # -- events

    def _expand_events(self, records: list) -> list[SimEvent]:
        last_epoch = None
        staged: list[tuple[int, int, SimEvent]] = []
        order = 0
        for i, rec in enumerate(records):
            where = f"events[{i}]"
            if not isinstance(rec, dict) or "kind" not in rec or "at_epoch" not in rec:
                raise ScenarioError("event needs kind and at_epoch", where)
            kind = rec["kind"]
            if kind not in _EVENT_OPTIONAL_BY_KIND:
                raise ScenarioError(f"unknown event kind {kind!r}", where)
            required, optional = _EVENT_OPTIONAL_BY_KIND[kind]
            _check_fields(rec, {"kind": str, "at_epoch": int, **required},
                          optional, where)
            epoch = rec["at_epoch"]
            if epoch < 0:
                raise ScenarioError("at_epoch must be non-negative", where)
            if last_epoch is not None and epoch < last_epoch:
                raise ScenarioError("events must be sorted by at_epoch", where)
            last_epoch = epoch
            for ep, ev in self._expand_one(kind, rec, where):
                staged.append((ep, order, ev))
                order += 1
        staged.sort(key=lambda item: (item[0], item[1]))
        return [ev for _ep, _o, ev in staged]

    def _expand_one(self, kind: str, rec: dict,
                    where: str) -> list[tuple[int, SimEvent]]:
        epoch = rec["at_epoch"]
        if kind == "flow_start":
            flow = self._parse_flow(rec["flow"], f"{where}.flow")
            return [(epoch, SimEvent(epoch, "flow_start", flow=flow))]
        if kind in ("flow_stop", "link_fail", "link_restore"):
            return [(epoch, SimEvent(epoch, kind, subject=rec["subject"]))]
        if kind == "transfer":
            return self._expand_transfer(rec, where)
        if kind == "mptcp":
            return self._expand_mptcp(rec, where)
        return self._expand_random_traffic(rec, where)

    def _expand_transfer(self, rec: dict, where: str):
        epoch = rec["at_epoch"]
        out = []
        stream_ids = tuple(f"{rec['id']}.s{i}" for i in range(rec["n_streams"]))
        self.transfers.append(TransferRequest(
            rec["id"], rec["src"], rec["dst"], rec["n_streams"], rec["paths"],
            stream_ids))
        for i, fid in enumerate(stream_ids):
            flow = self._make_flow(
                fid, rec["src"], rec["dst"], where,
                tp_dst=rec.get("tp_dst", TRANSFER_TP_DST),
                cap=rec.get("cap_mbps"), slice_id=rec.get("slice"),
                transfer=(rec["id"], i))
            out.append((epoch, SimEvent(epoch, "flow_start", flow=flow)))
        return out

    def _expand_mptcp(self, rec: dict, where: str):
        epoch = rec["at_epoch"]
        out = []
        for i in range(rec["subflows"]):
            options = frozenset({"mp_capable"} if i == 0 else {"mp_join"})
            flow = self._make_flow(
                f"{rec['id']}.sf{i}", rec["src"], rec["dst"], where,
                tp_dst=rec.get("tp_dst", DEFAULT_TP_DST),
                cap=rec.get("cap_mbps"), slice_id=rec.get("slice"),
                tcp_options=options)
            out.append((epoch, SimEvent(epoch, "flow_start", flow=flow)))
        return out

    def _expand_random_traffic(self, rec: dict, where: str):
        epoch = rec["at_epoch"]
        horizon = rec["horizon"]
        if horizon <= epoch:
            raise ScenarioError("horizon must exceed at_epoch", where)
        min_d = rec.get("min_duration", 3)
        max_d = rec.get("max_duration", 10)
        if not 1 <= min_d <= max_d:
            raise ScenarioError("need 1 <= min_duration <= max_duration", where)
        ports = rec.get("ports", list(RANDOM_TP_DST_CHOICES))
        out = []
        if "slices" in rec:
            pools = []
            for sid in rec["slices"]:
                if sid not in self.slice_by_id:
                    raise ScenarioError(f"unknown slice {sid!r}", where)
                pools.append((sid, [sh.host for sh in self.slice_by_id[sid].hosts]))
        elif "hosts" in rec:
            pools = [(None, list(rec["hosts"]))]
        else:
            raise ScenarioError("random_traffic needs slices or hosts", where)
        for sid, hosts in pools:
            if len(hosts) < 2:
                raise ScenarioError("random_traffic pool needs >= 2 hosts", where)
            label = sid if sid is not None else "all"
            for j in range(rec["flows"]):
                src, dst = self.rng.sample(sorted(hosts), 2)
                start = self.rng.randrange(epoch, horizon)
                stop = start + self.rng.randint(min_d, max_d)
                fid = f"rt-{label}-{j}"
                flow = self._make_flow(fid, src, dst, where,
                                       tp_dst=self.rng.choice(ports),
                                       cap=rec.get("cap_mbps"), slice_id=sid)
                out.append((start, SimEvent(start, "flow_start", flow=flow)))
                out.append((stop, SimEvent(stop, "flow_stop", subject=fid)))
        return out

    # -- flows

    def _parse_flow(self, rec: dict, where: str) -> TrafficFlow:
        _check_fields(rec, _FLOW_FIELDS, _FLOW_OPTIONAL, where)
        options = frozenset(rec.get("tcp_options", []))
        return self._make_flow(
            rec["id"], rec["src"], rec["dst"], where,
            tp_src=rec.get("tp_src"), tp_dst=rec.get("tp_dst", DEFAULT_TP_DST),
            ip_proto=rec.get("ip_proto", 6), cap=rec.get("cap_mbps"),
            class_hint=rec.get("class"), slice_id=rec.get("slice"),
            ip_src=rec.get("ip_src"), ip_dst=rec.get("ip_dst"),
            tcp_options=options)

    def _make_flow(self, fid: str, src: str, dst: str, where: str,
                   tp_src: int | None = None, tp_dst: int = DEFAULT_TP_DST,
                   ip_proto: int = 6, cap: float | None = None,
                   class_hint: str | None = None, slice_id: str | None = None,
                   ip_src: str | None = None, ip_dst: str | None = None,
                   tcp_options: frozenset = frozenset(),
                   transfer: tuple | None = None) -> TrafficFlow:
        if fid in self.flow_slice:
            raise ScenarioError(f"duplicate flow id {fid!r}", where)
        for end in (src, dst):
            if not self.topology.has_node(end) or not self.topology.is_host(end):
                raise ScenarioError(f"flow endpoint {end!r} is not a host", where)
        if class_hint is not None and class_hint not in FLOW_CLASSES:
            raise ScenarioError(f"unknown flow class {class_hint!r}", where)
        if self.slices:
            if slice_id is None:
                raise ScenarioError(
                    f"flow {fid!r} needs a slice in a sliced scenario", where)
            if slice_id not in self.slice_by_id:
                raise ScenarioError(f"unknown slice {slice_id!r}", where)
            for end in (src, dst):
                if self.host_slice.get(end) != slice_id:
                    raise ScenarioError(
                        f"host {end!r} is not bound to slice {slice_id!r}", where)
        elif slice_id is not None:
            raise ScenarioError("flow names a slice but none are defined", where)
        if tp_src is None:
            tp_src = self.next_tp_src
            self.next_tp_src += 1
        header = HeaderTuple(
            eth_src=self._mac(src), eth_dst=self._mac(dst),
            ip_src=ip4(ip_src) if ip_src is not None else self._ip(src, slice_id),
            ip_dst=ip4(ip_dst) if ip_dst is not None else self._ip(dst, slice_id),
            ip_proto=ip_proto, tp_src=tp_src, tp_dst=tp_dst,
            tcp_options=tcp_options)
        self.flow_slice[fid] = slice_id
        return TrafficFlow(fid, src, dst, per_stream_cap_mbps=cap,
                           class_hint=class_hint, header=header,
                           slice_id=slice_id, transfer=transfer)

    def _mac(self, host: str) -> int:
        return DEFAULT_MAC_BASE + self.host_index[host] + 1

    def _ip(self, host: str, slice_id: str | None) -> int:
        if slice_id is not None:
            if host not in self.host_vip:
                raise ScenarioError(f"host {host!r} has no slice address")
            return self.host_vip[host]
        return DEFAULT_HOST_IP_BASE + self.host_index[host] + 1

    def build(self) -> Scenario:
        return Scenario(
            name=self.name, source=self.source, topology=self.topology,
            slices=self.slices, controller=self.controller, epochs=self.epochs,
            seed=self.seed, declarations=self.declarations,
            transfers=self.transfers, events=self.events,
            flow_slice=self.flow_slice, host_slice=self.host_slice,
            description=self.obj.get("description"))


def _load_json_file(path: FsPath) -> dict:
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise ScenarioError(f"cannot read {path}: {e}") from None
    try:
        return json.loads(text)
    except json.JSONDecodeError as e:
        raise ScenarioError(f"invalid JSON in {path.name}: {e.msg}",
                            f"line {e.lineno}, column {e.colno}") from None


def parse_match(obj: dict, where: str = "match") -> MatchPattern:
    kwargs: dict = {}
    for key, value in obj.items():
        if key in ("ip_src", "ip_dst"):
            kwargs[key] = ip4(value) if isinstance(value, str) else value
        elif key == "tcp_options":
            kwargs[key] = frozenset(value)
        elif key in ("in_port", "eth_src", "eth_dst", "ip_proto",
                     "tp_src", "tp_dst"):
            kwargs[key] = value
        else:
            raise ScenarioError(f"unknown match field {key!r}", where)
    try:
        return MatchPattern(**kwargs)
    except ValueError as e:
        raise ScenarioError(str(e), where) from None


def load_scenario(name_or_path: str, *, seed: int | None = None,
                  epochs: int | None = None) -> Scenario:
    path = resolve_scenario(name_or_path)
    obj = _load_json_file(path)
    builder = _ScenarioBuilder(obj, path.stem, str(path.resolve()),
                               path.parent, seed, epochs)
    return builder.build()


# ---------------------------------------------------------------------------
# Controller wiring

def default_address_book(t: Topology) -> AddressBook:
    entries = []
    hosts = sorted(n.id for n in t.nodes if n.kind == "host")
    for index, host in enumerate(hosts):
        links = t.links_at(host)
        if len(links) != 1:
            continue
        switch = links[0].other_end(host)
        entries.append(HostAddress(
            host, DEFAULT_HOST_IP_BASE + index + 1,
            DEFAULT_MAC_BASE + index + 1,
            switch, t.port_of(switch, links[0].id)))
    return AddressBook(entries)


def tenant_address_book(t: Topology, spec: SliceSpec) -> AddressBook:
    hosts = sorted(n.id for n in t.nodes if n.kind == "host")
    host_index = {h: i for i, h in enumerate(hosts)}
    entries = []
    for sh in spec.hosts:
        links = t.links_at(sh.host)
        switch = links[0].other_end(sh.host)
        entries.append(HostAddress(
            sh.host, sh.ip, DEFAULT_MAC_BASE + host_index[sh.host] + 1,
            switch, t.port_of(switch, links[0].id)))
    return AddressBook(entries)


def build_controller(scenario: Scenario,
                     controller_override: str | None = None,
                     extra_declarations: tuple = ()) -> Controller:
    declarations = tuple(scenario.declarations) + tuple(extra_declarations)
    if scenario.slices:
        if controller_override is not None and \
                controller_override not in CONTROLLERS:
            raise ScenarioError(f"unknown controller {controller_override!r}")

        def tenant_factory(spec: SliceSpec) -> Controller:
            name = controller_override or spec.controller
            config = ControllerConfig(
                tenant_address_book(scenario.topology, spec),
                declarations=declarations,
                transfers=tuple(scenario.transfers))
            return CONTROLLERS[name](scenario.topology, config)

        return SliceFabric(scenario.topology, scenario.slices, tenant_factory)
    name = controller_override or scenario.controller
    if name not in CONTROLLERS:
        raise ScenarioError(f"unknown controller {name!r}")
    config = ControllerConfig(default_address_book(scenario.topology),
                              declarations=declarations,
                              transfers=tuple(scenario.transfers))
    return CONTROLLERS[name](scenario.topology, config)


# ---------------------------------------------------------------------------
# Running and reporting

@dataclass
class RunResult:
    scenario: Scenario
    controller_name: str
    series: list[EpochAllocation]
    report: dict
    log_lines: list[str]
    violations: list[str]

    @property
    def exit_code(self) -> int:
        return EXIT_ASSERTION if self.violations else EXIT_OK

    def directive_lines(self) -> list[str]:
        return [l for l in self.log_lines if l.startswith("D ")]


def _json_line(obj: dict) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


class _ForwardingAudit:
    """Per-epoch check that every routed flow's packets actually follow
    the assigned path, are delivered to the right host (and slice) and
    come out with the original header (addresses restored)."""

    def __init__(self, scenario: Scenario, fabric: SliceFabric | None):
        self.scenario = scenario
        self.fabric = fabric
        self.audited = 0
        self.violations: list[str] = []

    def __call__(self, sim: Simulation, record: EpochAllocation) -> None:
        for fid in sorted(sim.flows):
            flow = sim.flows[fid]
            if flow.path is None or not sim.path_is_up(flow.path):
                continue
            if flow.header is None:
                continue
            self.audited += 1
            prefix = f"epoch {record.epoch} flow {fid}"
            switch, port = sim.attachment(flow.src)
            ingress_link = sim.topology.link_at_port(switch, port)
            if ingress_link.id != flow.path.hops[0]:
                self.violations.append(
                    f"{prefix}: path does not start at the src host link")
                continue
            trace = forward(sim.topology, sim.tables, (switch, port),
                            flow.header, link_up=frozenset(sim.link_up))
            if trace.terminal.kind != "delivered":
                self.violations.append(
                    f"{prefix}: not delivered ({trace.terminal.kind})")
                continue
            if trace.terminal.node != flow.dst:
                self.violations.append(
                    f"{prefix}: delivered to {trace.terminal.node}, "
                    f"expected {flow.dst}")
                continue
            if list(flow.path.hops[1:]) != trace.link_sequence():
                self.violations.append(
                    f"{prefix}: trace followed {trace.link_sequence()}, "
                    f"expected {list(flow.path.hops[1:])}")
                continue
            final = trace.steps[-1].header
            original = flow.header
            mismatched = [
                name for name in ("eth_src", "eth_dst", "ip_src", "ip_dst",
                                  "ip_proto", "tp_src", "tp_dst", "tcp_options")
                if getattr(final, name) != getattr(original, name)]
            if mismatched:
                self.violations.append(
                    f"{prefix}: delivered header differs in {mismatched}")
                continue
            want_slice = self.scenario.flow_slice.get(fid)
            if want_slice is not None:
                got_slice = self.scenario.host_slice.get(trace.terminal.node)
                if got_slice != want_slice:
                    self.violations.append(
                        f"{prefix}: slice {want_slice} packet delivered into "
                        f"slice {got_slice}")


def run_scenario(name_or_path: str, *, controller: str | None = None,
                 epochs: int | None = None, seed: int | None = None,
                 declares: tuple = (), scenario: Scenario | None = None) -> RunResult:
    if scenario is None:
        scenario = load_scenario(name_or_path, seed=seed, epochs=epochs)
    ctl = build_controller(scenario, controller, declares)
    controller_name = controller or \
        ("slices" if scenario.slices else scenario.controller)
    fabric = ctl if isinstance(ctl, SliceFabric) else None

    log_lines = [
        "# sdnlab-log v" + LOG_VERSION,
        "# meta " + _json_line({
            "scenario": scenario.source, "controller": controller or "",
            "epochs": scenario.epochs, "seed": scenario.seed,
            "declares": [_declaration_obj(d) for d in declares]}),
    ]

    def event_tap(epoch: int, event) -> None:
        log_lines.append(f"E {epoch} " + _json_line(cc.event_to_obj(event)))

    def directive_tap(epoch: int, directive) -> None:
        log_lines.append(f"D {epoch} " + _json_line(cc.directive_to_obj(directive)))

    audit = _ForwardingAudit(scenario, fabric)
    sim = Simulation(scenario.topology, scenario.events, ctl, scenario.epochs,
                     event_tap=event_tap, directive_tap=directive_tap,
                     epoch_hook=audit)
    series = sim.run()

    violations = list(audit.violations)
    cross_events = 0
    tenant_events = 0
    rejected = dropped = 0
    if fabric is not None:
        tenant_events = len(fabric.audit.tenant_events)
        for slice_id, fid in fabric.audit.tenant_events:
            if scenario.flow_slice.get(fid) != slice_id:
                cross_events += 1
                violations.append(
                    f"event for flow {fid} delivered to tenant {slice_id}")
        rejected = len(fabric.audit.rejected)
        dropped = len(fabric.audit.dropped)

    report = _build_report(scenario, controller_name, series, audit,
                           cross_events, tenant_events, rejected, dropped,
                           violations)
    return RunResult(scenario, controller_name, series, report, log_lines,
                     violations)


def _declaration_obj(d: AppDeclaration) -> dict:
    return {"class": d.flow_class, "at_epoch": d.at_epoch,
            "match": cc.match_to_obj(d.match)}


def _build_report(scenario: Scenario, controller_name: str,
                  series: list[EpochAllocation], audit: _ForwardingAudit,
                  cross_events: int, tenant_events: int, rejected: int,
                  dropped: int, violations: list[str]) -> dict:
    flow_ids = sorted({fid for rec in series for fid in rec.rates})
    flows = {}
    for fid in flow_ids:
        rates = [rec.rates[fid] for rec in series if fid in rec.rates]
        rtts = []
        paths_seen: list[tuple[str, ...]] = []
        for rec in series:
            p = rec.paths.get(fid)
            if p is not None:
                rtts.append(flow_rtt_ms(scenario.topology, p))
                if not paths_seen or paths_seen[-1] != p.hops:
                    paths_seen.append(p.hops)
        flows[fid] = {
            "mean_rate_mbps": sum(rates) / len(rates) if rates else 0.0,
            "mean_rtt_ms": sum(rtts) / len(rtts) if rtts else None,
            "path_changes": max(len(paths_seen) - 1, 0),
            "slice": scenario.flow_slice.get(fid),
        }
    epoch_aggregate = [rec.aggregate_mbps() for rec in series]
    return {
        "scenario": scenario.name,
        "controller": controller_name,
        "epochs": scenario.epochs,
        "seed": scenario.seed,
        "flows": flows,
        "epoch_aggregate_mbps": epoch_aggregate,
        "aggregate_mean_mbps": (sum(epoch_aggregate) / len(epoch_aggregate)
                                if epoch_aggregate else 0.0),
        "isolation": {
            "audited_packets": audit.audited,
            "violations": violations,
            "tenant_events": tenant_events,
            "cross_slice_events": cross_events,
            "rejected_directives": rejected,
            "dropped_directives": dropped,
        },
        "metrics": series_to_obj(series),
    }


def compare(report_a: dict, report_b: dict) -> dict:
    """Per-flow and aggregate deltas between two runs of the same scenario."""
    flows_a, flows_b = report_a["flows"], report_b["flows"]
    if set(flows_a) != set(flows_b):
        raise ScenarioError("incomparable reports: different flow sets")
    if report_a["scenario"] != report_b["scenario"]:
        raise ScenarioError("incomparable reports: different scenarios")
    per_flow = {}
    improved_rate = worse_rate = improved_rtt = worse_rtt = 0
    for fid in sorted(flows_a):
        a, b = flows_a[fid], flows_b[fid]
        rate_delta = a["mean_rate_mbps"] - b["mean_rate_mbps"]
        if a["mean_rtt_ms"] is None or b["mean_rtt_ms"] is None:
            rtt_delta = None
        else:
            rtt_delta = a["mean_rtt_ms"] - b["mean_rtt_ms"]
        per_flow[fid] = {"rate_delta_mbps": rate_delta,
                         "rtt_delta_ms": rtt_delta}
        improved_rate += rate_delta > 0
        worse_rate += rate_delta < 0
        if rtt_delta is not None:
            improved_rtt += rtt_delta < 0
            worse_rtt += rtt_delta > 0
    return {
        "scenario": report_a["scenario"],
        "controller_a": report_a["controller"],
        "controller_b": report_b["controller"],
        "per_flow": per_flow,
        "aggregate_delta_mbps": (report_a["aggregate_mean_mbps"]
                                 - report_b["aggregate_mean_mbps"]),
        "sign_summary": {
            "flows_with_higher_rate": improved_rate,
            "flows_with_lower_rate": worse_rate,
            "flows_with_lower_rtt": improved_rtt,
            "flows_with_higher_rtt": worse_rtt,
        },
    }


# ---------------------------------------------------------------------------
# Replay

def replay_log(log_path: FsPath) -> tuple[list[str], list[str], int | None]:
    """Re-drive the logged events through a fresh controller.

    Returns (original directive lines, regenerated directive lines,
    first divergent line index or None)."""
    lines = log_path.read_text(encoding="utf-8").splitlines()
    if not lines or lines[0] != "# sdnlab-log v" + LOG_VERSION:
        raise ScenarioError("not a sdnlab log or unsupported version")
    if len(lines) < 2 or not lines[1].startswith("# meta "):
        raise ScenarioError("log missing meta header")
    meta = json.loads(lines[1][len("# meta "):])
    source = FsPath(meta["scenario"])
    if not source.exists():
        candidate = log_path.parent / source.name
        if candidate.exists():
            source = candidate
        else:
            raise ScenarioError(f"scenario {meta['scenario']!r} not found")
    scenario = load_scenario(str(source), seed=meta["seed"],
                             epochs=meta["epochs"])
    declares = tuple(
        AppDeclaration(parse_match(d["match"]), d["class"], d["at_epoch"])
        for d in meta.get("declares", []))
    ctl = build_controller(scenario, meta["controller"] or None, declares)
    original = [l for l in lines if l.startswith("D ")]
    regenerated: list[str] = []
    for line in lines:
        if not line.startswith("E "):
            continue
        _tag, epoch_text, payload = line.split(" ", 2)
        event = cc.event_from_obj(json.loads(payload))
        for directive in ctl.handle_event(event):
            regenerated.append(
                f"D {epoch_text} " + _json_line(cc.directive_to_obj(directive)))
    divergence = None
    for i, (a, b) in enumerate(zip(original, regenerated)):
        if a != b:
            divergence = i
            break
    if divergence is None and len(original) != len(regenerated):
        divergence = min(len(original), len(regenerated))
    return original, regenerated, divergence


# ---------------------------------------------------------------------------
# CLI

def _parse_declare(text: str) -> AppDeclaration:
    """--declare CLASS:field=value[,field=value...][@EPOCH]"""
    at_epoch = 0
    if "@" in text:
        text, epoch_text = text.rsplit("@", 1)
        at_epoch = int(epoch_text)
    if ":" not in text:
        raise ScenarioError("--declare needs CLASS:field=value[,...][@EPOCH]")
    class_name, fields_text = text.split(":", 1)
    if class_name not in FLOW_CLASSES:
        raise ScenarioError(f"unknown flow class {class_name!r}")
    match_obj: dict = {}
    for part in fields_text.split(","):
        if "=" not in part:
            raise ScenarioError(f"bad --declare field {part!r}")
        key, value = part.split("=", 1)
        match_obj[key] = value if key in ("ip_src", "ip_dst") else int(value)
    return AppDeclaration(parse_match(match_obj, "--declare"), class_name,
                          at_epoch)


def _out_dir(args_out: str | None, scenario_name: str) -> FsPath:
    if args_out:
        return FsPath(args_out)
    base = os.environ.get("SDNLAB_OUT")
    if base:
        return FsPath(base) / scenario_name
    return FsPath("sdnlab-out") / scenario_name


def _write_outputs(result: RunResult, out_dir: FsPath) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "metrics.csv").write_text(series_to_csv(result.series),
                                         encoding="utf-8")
    (out_dir / "metrics.json").write_text(
        json.dumps(series_to_obj(result.series), sort_keys=True, indent=2)
        + "\n", encoding="utf-8")
    (out_dir / "report.json").write_text(
        json.dumps(result.report, sort_keys=True, indent=2) + "\n",
        encoding="utf-8")
    (out_dir / "run.log").write_text("\n".join(result.log_lines) + "\n",
                                     encoding="utf-8")


def _cmd_run(args) -> int:
    declares = tuple(_parse_declare(d) for d in args.declare or ())
    result = run_scenario(args.scenario, controller=args.controller,
                          epochs=args.epochs, seed=args.seed,
                          declares=declares)
    if args.compare_baseline and result.controller_name != "baseline":
        base = run_scenario(args.scenario, controller="baseline",
                            epochs=args.epochs, seed=args.seed,
                            declares=declares)
        result.report["baseline_comparison"] = compare(result.report,
                                                       base.report)
    out_dir = _out_dir(args.out, result.scenario.name)
    _write_outputs(result, out_dir)
    print(f"scenario {result.scenario.name}: controller="
          f"{result.controller_name} epochs={result.scenario.epochs}")
    for fid, summary in sorted(result.report["flows"].items()):
        rtt = summary["mean_rtt_ms"]
        rtt_text = f"{rtt:.1f}" if rtt is not None else "-"
        print(f"  {fid}: mean_rate={summary['mean_rate_mbps']:.1f} Mbps "
              f"rtt={rtt_text} ms path_changes={summary['path_changes']}")
    print(f"  aggregate mean: {result.report['aggregate_mean_mbps']:.1f} Mbps")
    if result.violations:
        print(f"  VIOLATIONS ({len(result.violations)}):")
        for v in result.violations[:10]:
            print(f"    {v}")
    print(f"  outputs: {out_dir}")
    return result.exit_code


def _cmd_validate(args) -> int:
    scenario = load_scenario(args.scenario)
    print(f"ok: {scenario.name} ({len(scenario.events)} events, "
          f"{scenario.epochs} epochs, "
          f"{len(scenario.topology.nodes)} nodes)")
    return EXIT_OK


def _cmd_compare(args) -> int:
    report_a = _load_json_file(FsPath(args.report_a))
    report_b = _load_json_file(FsPath(args.report_b))
    doc = compare(report_a, report_b)
    text = json.dumps(doc, sort_keys=True, indent=2)
    if args.out:
        FsPath(args.out).write_text(text + "\n", encoding="utf-8")
    else:
        print(text)
    return EXIT_OK


def _cmd_replay(args) -> int:
    original, regenerated, divergence = replay_log(FsPath(args.log))
    if divergence is None:
        print(f"replay ok: {len(original)} directives identical")
        return EXIT_OK
    print(f"replay DIVERGED at directive {divergence}:")
    def _line(rows, i):
        return rows[i] if i < len(rows) else "<missing>"
    print(f"  logged:     {_line(original, divergence)}")
    print(f"  regenerated:{_line(regenerated, divergence)}")
    return EXIT_ASSERTION


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sdnlab",
        description="Deterministic SDN laboratory scenario runner")
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="run a scenario and write outputs")
    run_p.add_argument("scenario", help="scenario path or shipped name")
    run_p.add_argument("--controller", choices=sorted(CONTROLLERS),
                       help="override the scenario's controller(s)")
    run_p.add_argument("--out", help="output directory")
    run_p.add_argument("--epochs", type=int, help="override run length")
    run_p.add_argument("--seed", type=int, help="override the scenario seed")
    run_p.add_argument("--declare", action="append", metavar="SPEC",
                       help="inject a flow-class declaration: "
                            "CLASS:field=value[,...][@EPOCH]")
    run_p.add_argument("--compare-baseline", action="store_true",
                       help="also run the baseline controller and embed deltas")
    run_p.set_defaults(func=_cmd_run)

    val_p = sub.add_parser("validate", help="validate a scenario document")
    val_p.add_argument("scenario")
    val_p.set_defaults(func=_cmd_validate)

    cmp_p = sub.add_parser("compare", help="diff two run reports")
    cmp_p.add_argument("report_a")
    cmp_p.add_argument("report_b")
    cmp_p.add_argument("--out")
    cmp_p.set_defaults(func=_cmd_compare)

    rep_p = sub.add_parser("replay", help="re-drive a run log and diff directives")
    rep_p.add_argument("log")
    rep_p.set_defaults(func=_cmd_replay)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ScenarioError as e:
        print(f"validation error: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    except DirectiveError as e:
        print(f"controller directive error: {e}", file=sys.stderr)
        return EXIT_INTERNAL
    except SdnLabError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
