"""Multi-domain network virtualization by address division and translation.

Each administrative domain runs its own proxy; there is no central
slicing controller.  A proxy owns a /16 physical block per slice inside
the reserved 240.0.0.0/8 range and rewrites IP addresses between a
tenant's virtual view and the shared physical network.  Translation is
offset-preserving (the low 16 bits of a virtual address carry over), so
it is invertible by arithmetic alone.

Tenant controllers stay unmodified: the fabric feeds them events
rewritten into their virtual view and translates their directives back,
stamping ownership and enforcing that a tenant can only touch its own
address space.
"""

from __future__ import annotations

import ipaddress
from dataclasses import dataclass, field

from .controller_core import (
    Controller,
    ControllerEvent,
    Directive,
    EpochTick,
    FlowEnded,
    Install,
    LinkStats,
    PacketIn,
    Remove,
    RouteFlow,
)
from .dataplane import (
    FlowEntry,
    HeaderTuple,
    MatchPattern,
    Output,
    SetField,
    format_ip4,
)
from .errors import (
    BlockExhaustedError,
    DirectiveError,
    DuplicateIdError,
    IsolationError,
    ScenarioError,
    SliceSpaceError,
)
from .topo import Topology

BLOCK_RANGE = ipaddress.IPv4Network("240.0.0.0/8")
BLOCK_PREFIX_LEN = 16
BLOCK_COUNT = 256
_LOW16 = 0xFFFF


@dataclass(frozen=True)
class SliceHost:
    host: str
    ip: int  # virtual address


@dataclass(frozen=True)
class SliceSpec:
    """A tenant slice: id, the virtual space it may use, its controller
    and the hosts (edge attachment points) that belong to it."""

    id: str
    virtual_prefixes: tuple[ipaddress.IPv4Network, ...]
    controller: str = "baseline"
    hosts: tuple[SliceHost, ...] = ()

    def __post_init__(self):
        if not self.virtual_prefixes:
            raise ScenarioError("slice needs at least one virtual prefix",
                                f"slice {self.id}")
        intervals = []
        for p in self.virtual_prefixes:
            if p.prefixlen < BLOCK_PREFIX_LEN:
                raise ScenarioError(
                    f"virtual prefix {p} wider than /{BLOCK_PREFIX_LEN}; "
                    "it cannot fit one physical block", f"slice {self.id}")
            base = int(p.network_address)
            lo = base & _LOW16
            intervals.append((lo, lo + p.num_addresses))
        intervals.sort()
        for (a0, a1), (b0, _b1) in zip(intervals, intervals[1:]):
            if b0 < a1:
                raise ScenarioError(
                    "virtual prefixes overlap in their low 16 bits; "
                    "offset translation would not be injective",
                    f"slice {self.id}")
        for h in self.hosts:
            if not self.contains(h.ip):
                raise ScenarioError(
                    f"host {h.host} address {format_ip4(h.ip)} outside the "
                    "slice's virtual space", f"slice {self.id}")

    def contains(self, addr: int) -> bool:
        for n in self.virtual_prefixes:
            if int(n.network_address) <= addr <= int(n.broadcast_address):
                return True
        return False


@dataclass(frozen=True)
class PhysicalBlock:
    domain: str
    slice_id: str
    network: ipaddress.IPv4Network


@dataclass(frozen=True)
class TranslationEntry:
    slice_id: str
    virtual_addr: int
    physical_addr: int


def block_network(index: int) -> ipaddress.IPv4Network:
    if not 0 <= index < BLOCK_COUNT:
        raise ValueError(f"block index {index} out of range")
    base = int(BLOCK_RANGE.network_address) | (index << 16)
    return ipaddress.IPv4Network((base, BLOCK_PREFIX_LEN))


class SliceRegistry:
    """Registration protocol across domains, modeled as a reliable
    broadcast: every domain observes registrations in the same order and
    allocates from its own per-domain block namespace.  Registration is
    atomic; if any domain is out of blocks, nothing is committed."""

    def __init__(self, domains: list[str]):
        self.domains = sorted(domains)
        self._blocks: dict[str, dict[str, int]] = {d: {} for d in self.domains}
        self._slices: dict[str, SliceSpec] = {}

    def register_slice(self, spec: SliceSpec) -> dict[str, PhysicalBlock]:
        if spec.id in self._slices:
            raise DuplicateIdError(f"slice id {spec.id!r} already registered")
        chosen: dict[str, int] = {}
        for d in self.domains:
            used = set(self._blocks[d].values())
            index = next((i for i in range(BLOCK_COUNT) if i not in used), None)
            if index is None:
                raise BlockExhaustedError(
                    f"domain {d!r} has no free /16 block for slice {spec.id!r}")
            chosen[d] = index
        for d, index in chosen.items():
            self._blocks[d][spec.id] = index
        self._slices[spec.id] = spec
        return {d: PhysicalBlock(d, spec.id, block_network(i))
                for d, i in chosen.items()}

    def deregister_slice(self, slice_id: str) -> None:
        if slice_id not in self._slices:
            raise KeyError(slice_id)
        del self._slices[slice_id]
        for d in self.domains:
            del self._blocks[d][slice_id]

    def spec(self, slice_id: str) -> SliceSpec:
        return self._slices[slice_id]

    def slice_ids(self) -> list[str]:
        return sorted(self._slices)

    def block_index(self, domain: str, slice_id: str) -> int:
        try:
            return self._blocks[domain][slice_id]
        except KeyError:
            raise SliceSpaceError(
                f"slice {slice_id!r} has no block in domain {domain!r}") from None

    def block(self, domain: str, slice_id: str) -> PhysicalBlock:
        return PhysicalBlock(domain, slice_id,
                             block_network(self.block_index(domain, slice_id)))

    def slice_of_physical(self, domain: str, addr: int) -> str | None:
        if addr & 0xFF000000 != int(BLOCK_RANGE.network_address):
            return None
        index = (addr >> 16) & 0xFF
        for slice_id, block in self._blocks[domain].items():
            if block == index:
                return slice_id
        return None


class DomainProxy:
    """Per-domain translator between virtual and physical address views."""

    def __init__(self, domain: str, switches: frozenset[str],
                 registry: SliceRegistry):
        self.domain = domain
        self.switches = switches
        self.registry = registry
        self.enabled = True
        self.mappings: set[TranslationEntry] = set()

    # -- address arithmetic

    def virt_to_phys(self, slice_id: str, addr: int) -> int:
        spec = self.registry.spec(slice_id)
        if not spec.contains(addr):
            raise SliceSpaceError(
                f"address {format_ip4(addr)} outside virtual space of "
                f"slice {slice_id!r}")
        base = int(block_network(
            self.registry.block_index(self.domain, slice_id)).network_address)
        phys = base | (addr & _LOW16)
        self.mappings.add(TranslationEntry(slice_id, addr, phys))
        return phys

    def phys_to_virt(self, addr: int) -> tuple[str, int]:
        slice_id = self.registry.slice_of_physical(self.domain, addr)
        if slice_id is None:
            raise SliceSpaceError(
                f"physical address {format_ip4(addr)} not attributable to any "
                f"slice in domain {self.domain!r}")
        spec = self.registry.spec(slice_id)
        low = addr & _LOW16
        for prefix in spec.virtual_prefixes:
            base = int(prefix.network_address)
            lo = base & _LOW16
            if lo <= low < lo + prefix.num_addresses:
                virt = (base & ~_LOW16) | low
                self.mappings.add(TranslationEntry(slice_id, virt, addr))
                return slice_id, virt
        raise SliceSpaceError(
            f"physical address {format_ip4(addr)} has no virtual preimage in "
            f"slice {slice_id!r}")

    # -- header translation

    def translate_egress(self, slice_id: str, h: HeaderTuple) -> HeaderTuple:
        """Virtual header entering this domain -> physical header."""
        return h.with_field("ip_src", self.virt_to_phys(slice_id, h.ip_src)) \
                .with_field("ip_dst", self.virt_to_phys(slice_id, h.ip_dst))

    def translate_ingress(self, h: HeaderTuple) -> tuple[str, HeaderTuple]:
        """Physical header leaving this domain -> (slice, virtual header)."""
        slice_src, virt_src = self.phys_to_virt(h.ip_src)
        slice_dst, virt_dst = self.phys_to_virt(h.ip_dst)
        if slice_src != slice_dst:
            raise SliceSpaceError(
                "header src and dst attribute to different slices "
                f"({slice_src!r} vs {slice_dst!r})")
        return slice_src, h.with_field("ip_src", virt_src) \
                           .with_field("ip_dst", virt_dst)

    def translate_inter_domain(self, dst: "DomainProxy", slice_id: str,
                               h: HeaderTuple) -> HeaderTuple:
        """Rewrite a header from this domain's block into dst's block,
        preserving the virtual-address identity."""
        _s, virtual = self.translate_ingress(h)
        if _s != slice_id:
            raise SliceSpaceError(
                f"header attributes to slice {_s!r}, not {slice_id!r}")
        return dst.translate_egress(slice_id, virtual)

    def dump_mappings(self) -> str:
        lines = [f"{e.slice_id}|{format_ip4(e.virtual_addr)}|{format_ip4(e.physical_addr)}"
                 for e in sorted(self.mappings,
                                 key=lambda e: (e.slice_id, e.virtual_addr))]
        return "\n".join(lines)


@dataclass(frozen=True)
class HostBinding:
    slice_id: str
    host: str
    ip: int
    switch: str
    port: int


@dataclass
class FabricAudit:
    tenant_events: list[tuple[str, str]] = field(default_factory=list)
    rejected: list[str] = field(default_factory=list)
    dropped: list[str] = field(default_factory=list)


class SliceFabric(Controller):
    """The whole slicing control plane: per-domain proxies plus one
    tenant controller per slice.  Looks like a single controller to the
    simulator."""

    name = "slices"

    def __init__(self, topology: Topology, slices: list[SliceSpec],
                 tenant_factory):
        self.topology = topology
        self.registry = SliceRegistry(topology.domains())
        self.proxies: dict[str, DomainProxy] = {}
        for domain in self.registry.domains:
            switches = frozenset(n.id for n in topology.nodes
                                 if n.kind == "switch" and n.domain == domain)
            self.proxies[domain] = DomainProxy(domain, switches, self.registry)
        self.blocks: dict[str, dict[str, PhysicalBlock]] = {}
        self.tenants: dict[str, Controller] = {}
        self.bindings: list[HostBinding] = []
        self.audit = FabricAudit()
        self._flow_slice: dict[str, str] = {}
        seen_hosts: set[str] = set()
        for spec in slices:
            self.blocks[spec.id] = self.registry.register_slice(spec)
            for sh in spec.hosts:
                if sh.host in seen_hosts:
                    raise ScenarioError(
                        f"host {sh.host!r} bound to more than one slice")
                seen_hosts.add(sh.host)
                switch, port = _attachment(topology, sh.host)
                self.bindings.append(
                    HostBinding(spec.id, sh.host, sh.ip, switch, port))
            self.tenants[spec.id] = tenant_factory(spec)
        self._by_port = {(b.switch, b.port): b for b in self.bindings}
        self._by_ip = {(b.slice_id, b.ip): b for b in self.bindings}
        self._by_host = {b.host: b for b in self.bindings}

    # -- lookups

    def proxy_of_switch(self, switch: str) -> DomainProxy:
        return self.proxies[self.topology.node(switch).domain]

    def binding_of_host(self, host: str) -> HostBinding | None:
        return self._by_host.get(host)

    def slice_of_flow(self, flow_id: str) -> str | None:
        return self._flow_slice.get(flow_id)

    def disable_proxy(self, domain: str) -> None:
        self.proxies[domain].enabled = False

    # -- event mediation

    def handle_event(self, event: ControllerEvent) -> list[Directive]:
        if isinstance(event, PacketIn):
            return self._on_packet_in(event)
        if isinstance(event, FlowEnded):
            slice_id = self._flow_slice.pop(event.flow_id, None)
            if slice_id is None:
                return []
            self.audit.tenant_events.append((slice_id, event.flow_id))
            return self._mediate_all(slice_id,
                                     self.tenants[slice_id].handle_event(event))
        if isinstance(event, (LinkStats, EpochTick)):
            out: list[Directive] = []
            for slice_id in sorted(self.tenants):
                out.extend(self._mediate_all(
                    slice_id, self.tenants[slice_id].handle_event(event)))
            return out
        raise TypeError(f"unknown event {event!r}")

    def _on_packet_in(self, event: PacketIn) -> list[Directive]:
        proxy = self.proxy_of_switch(event.switch)
        if not proxy.enabled:
            self.audit.dropped.append(
                f"packet_in from {event.switch} dropped: proxy "
                f"{proxy.domain!r} disabled")
            return []
        binding = self._by_port.get((event.switch, event.port))
        if binding is not None:
            slice_id, header = binding.slice_id, event.header
        else:
            try:
                slice_id, header = proxy.translate_ingress(event.header)
            except SliceSpaceError as e:
                self.audit.dropped.append(f"unattributable packet_in: {e}")
                return []
        self._flow_slice[event.flow_id] = slice_id
        self.audit.tenant_events.append((slice_id, event.flow_id))
        tenant_event = PacketIn(event.switch, event.port, header, event.flow_id)
        return self._mediate_all(
            slice_id, self.tenants[slice_id].handle_event(tenant_event))

    def mediate_tenant(self, proxy: DomainProxy, slice_id: str,
                       event: ControllerEvent) -> list[Directive]:
        """Run one event through one slice's tenant and translate the
        resulting directives.  The proxy argument names the domain the
        event originated from; translation of each directive is done by
        the proxy owning the directive's switch."""
        if not proxy.enabled:
            return []
        return self._mediate_all(slice_id,
                                 self.tenants[slice_id].handle_event(event))

    # -- directive mediation

    def _mediate_all(self, slice_id: str,
                     directives: list[Directive]) -> list[Directive]:
        out: list[Directive] = []
        for d in directives:
            translated = self._mediate_one(slice_id, d)
            if translated is not None:
                out.append(translated)
        return out

    def _mediate_one(self, slice_id: str, d: Directive) -> Directive | None:
        if isinstance(d, Install):
            proxy = self.proxy_of_switch(d.switch)
            if not proxy.enabled:
                self.audit.dropped.append(
                    f"install on {d.switch} dropped: proxy {proxy.domain!r} disabled")
                return None
            try:
                return self._translate_install(proxy, slice_id, d)
            except (IsolationError, SliceSpaceError) as e:
                self.audit.rejected.append(f"slice {slice_id}: {e}")
                return None
        if isinstance(d, Remove):
            proxy = self.proxy_of_switch(d.switch)
            if not proxy.enabled:
                self.audit.dropped.append(
                    f"remove on {d.switch} dropped: proxy {proxy.domain!r} disabled")
                return None
            return Remove(d.switch, f"{slice_id}:{d.cookie}")
        if isinstance(d, RouteFlow):
            owner = self._flow_slice.get(d.flow_id)
            if owner != slice_id:
                self.audit.rejected.append(
                    f"slice {slice_id}: route_flow for foreign flow {d.flow_id!r}")
                return None
            blocked = [s for s in d.path.node_sequence(self.topology)
                       if self.topology.node(s).kind == "switch"
                       and not self.proxy_of_switch(s).enabled]
            if blocked:
                self.audit.dropped.append(
                    f"route_flow {d.flow_id} dropped: switch {blocked[0]} in a "
                    "disabled domain")
                return None
            return d
        raise DirectiveError(f"unknown directive {d!r}")

    def _translate_install(self, proxy: DomainProxy, slice_id: str,
                           d: Install) -> Install:
        spec = self.registry.spec(slice_id)
        entry = d.entry
        fields = entry.match.specified_fields()
        for name in ("ip_src", "ip_dst"):
            value = fields.get(name)
            if value is not None and not spec.contains(value):
                raise IsolationError(
                    f"match {name}={format_ip4(value)} outside the virtual "
                    f"space of slice {slice_id!r}")
        for a in entry.actions:
            if isinstance(a, SetField) and a.field in ("ip_src", "ip_dst"):
                raise IsolationError(
                    "tenants may not rewrite IP fields; translation is owned "
                    "by the fabric")

        virt_src = fields.get("ip_src")
        virt_dst = fields.get("ip_dst")
        src_binding = (self._by_ip.get((slice_id, virt_src))
                       if virt_src is not None else None)
        edge_ingress = src_binding is not None and src_binding.switch == d.switch

        match_kw = dict(fields)
        if edge_ingress:
            match_kw["in_port"] = src_binding.port
            inbound = {"ip_src": virt_src, "ip_dst": virt_dst}
        else:
            inbound = {}
            for name, virt in (("ip_src", virt_src), ("ip_dst", virt_dst)):
                if virt is not None:
                    phys = proxy.virt_to_phys(slice_id, virt)
                    match_kw[name] = phys
                    inbound[name] = phys
                else:
                    inbound[name] = None

        output = next((a for a in entry.actions if isinstance(a, Output)), None)
        passthrough = tuple(a for a in entry.actions
                            if not isinstance(a, Output))
        sets: list[SetField] = []
        if output is not None:
            link = self.topology.link_at_port(d.switch, output.port)
            peer = link.other_end(d.switch)
            if self.topology.is_host(peer):
                target = {"ip_src": virt_src, "ip_dst": virt_dst}
            else:
                peer_proxy = self.proxy_of_switch(peer)
                target = {}
                for name, virt in (("ip_src", virt_src), ("ip_dst", virt_dst)):
                    target[name] = (peer_proxy.virt_to_phys(slice_id, virt)
                                    if virt is not None else None)
            for name in ("ip_src", "ip_dst"):
                if target[name] is not None and target[name] != inbound[name]:
                    sets.append(SetField(name, target[name]))
        actions = passthrough + tuple(sets) + \
            ((output,) if output is not None else ())
        new_entry = FlowEntry(entry.priority, MatchPattern(**match_kw),
                              actions, cookie=f"{slice_id}:{entry.cookie}",
                              owner=slice_id)
        return Install(d.switch, new_entry)


def _attachment(topology: Topology, host: str) -> tuple[str, int]:
    if not topology.is_host(host):
        raise ScenarioError(f"slice host {host!r} is not a host node")
    links = topology.links_at(host)
    if len(links) != 1:
        raise ScenarioError(f"slice host {host!r} must have exactly one link")
    switch = links[0].other_end(host)
    return switch, topology.port_of(switch, links[0].id)
