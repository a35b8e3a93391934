"""OpenFlow-style switch abstraction: prioritized match-action tables,
header rewriting and hop-by-hop forwarding traces.

Matching is exact-value-or-wildcard (no prefix masks); equal priorities
tie-break on installation order so classification is deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

from .errors import DirectiveError, UnknownLinkError, UnknownNodeError
from .topo import Topology

TCP_PROTO = 6
MP_CAPABLE = "mp_capable"
MP_JOIN = "mp_join"
TCP_OPTION_FLAGS = frozenset({MP_CAPABLE, MP_JOIN})

HOP_LIMIT = 64

REWRITABLE_FIELDS = frozenset(
    {"ip_src", "ip_dst", "eth_src", "eth_dst", "tp_src", "tp_dst"}
)
MATCH_FIELDS = ("in_port", "eth_src", "eth_dst", "ip_src", "ip_dst",
                "ip_proto", "tp_src", "tp_dst", "tcp_options")

_FIELD_WIDTHS = {"in_port": 32, "eth_src": 48, "eth_dst": 48,
                 "ip_src": 32, "ip_dst": 32, "ip_proto": 8,
                 "tp_src": 16, "tp_dst": 16}


def ip4(text: str) -> int:
    """Dotted-quad string to 32-bit int."""
    parts = text.split(".")
    if len(parts) != 4 or not all(p.isdigit() and 0 <= int(p) <= 255 for p in parts):
        raise ValueError(f"invalid IPv4 address {text!r}")
    a, b, c, d = (int(p) for p in parts)
    return (a << 24) | (b << 16) | (c << 8) | d


def format_ip4(value: int) -> str:
    return f"{value >> 24 & 255}.{value >> 16 & 255}.{value >> 8 & 255}.{value & 255}"


@dataclass(frozen=True)
class HeaderTuple:
    in_port: int = 0
    eth_src: int = 0
    eth_dst: int = 0
    ip_src: int = 0
    ip_dst: int = 0
    ip_proto: int = TCP_PROTO
    tp_src: int = 0
    tp_dst: int = 0
    tcp_options: frozenset[str] = frozenset()

    def __post_init__(self):
        for name, width in _FIELD_WIDTHS.items():
            value = getattr(self, name)
            if not 0 <= value < (1 << width):
                raise ValueError(f"header field {name}={value} exceeds {width} bits")
        object.__setattr__(self, "tcp_options", frozenset(self.tcp_options))
        if self.tcp_options and self.ip_proto != TCP_PROTO:
            raise ValueError("tcp_options require ip_proto TCP")
        unknown = self.tcp_options - TCP_OPTION_FLAGS
        if unknown:
            raise ValueError(f"unknown tcp option flags {sorted(unknown)}")

    def with_field(self, field: str, value) -> "HeaderTuple":
        return replace(self, **{field: value})

    def five_tuple(self) -> tuple[int, int, int, int, int]:
        return (self.ip_src, self.ip_dst, self.ip_proto, self.tp_src, self.tp_dst)


@dataclass(frozen=True)
class MatchPattern:
    """Exact values to require; unset fields are wildcards.

    An all-wildcard pattern must be created explicitly via
    :meth:`match_all` so that an accidentally empty match is an error.
    """

    in_port: int | None = None
    eth_src: int | None = None
    eth_dst: int | None = None
    ip_src: int | None = None
    ip_dst: int | None = None
    ip_proto: int | None = None
    tp_src: int | None = None
    tp_dst: int | None = None
    tcp_options: frozenset[str] | None = None
    wildcard_all: bool = False

    def __post_init__(self):
        if self.tcp_options is not None:
            object.__setattr__(self, "tcp_options", frozenset(self.tcp_options))
        if not self.wildcard_all and not self.specified_fields():
            raise ValueError("match specifies no field; use MatchPattern.match_all()")

    @classmethod
    def match_all(cls) -> "MatchPattern":
        return cls(wildcard_all=True)

    @classmethod
    def five_tuple(cls, h: HeaderTuple) -> "MatchPattern":
        return cls(ip_src=h.ip_src, ip_dst=h.ip_dst, ip_proto=h.ip_proto,
                   tp_src=h.tp_src, tp_dst=h.tp_dst)

    def specified_fields(self) -> dict[str, object]:
        return {f: getattr(self, f) for f in MATCH_FIELDS if getattr(self, f) is not None}

    def matches(self, h: HeaderTuple) -> bool:
        for name, wanted in self.specified_fields().items():
            if getattr(h, name) != wanted:
                return False
        return True


@dataclass(frozen=True)
class Output:
    port: int


@dataclass(frozen=True)
class SetField:
    field: str
    value: int


@dataclass(frozen=True)
class Drop:
    pass


Action = Output | SetField | Drop


@dataclass(frozen=True)
class FlowEntry:
    priority: int
    match: MatchPattern
    actions: tuple[Action, ...]
    cookie: str
    owner: str = "root"

    def __post_init__(self):
        object.__setattr__(self, "actions", tuple(self.actions))
        outputs = [a for a in self.actions if isinstance(a, Output)]
        if len(outputs) > 1:
            raise ValueError("at most one output action per entry")
        if any(isinstance(a, Drop) for a in self.actions) and len(self.actions) > 1:
            raise ValueError("drop excludes all other actions")
        for a in self.actions:
            if isinstance(a, SetField) and a.field not in REWRITABLE_FIELDS:
                raise ValueError(f"field {a.field!r} is not rewritable")


@dataclass(frozen=True)
class EntryHandle:
    switch: str
    cookie: str
    seq: int


class SwitchTable:
    """One switch's flow table; keeps installation order for tie-breaks."""

    def __init__(self, switch_id: str):
        self.switch_id = switch_id
        self._entries: list[tuple[int, FlowEntry]] = []
        self._next_seq = 0

    def install(self, entry: FlowEntry) -> EntryHandle:
        seq = self._next_seq
        self._next_seq += 1
        self._entries.append((seq, entry))
        return EntryHandle(self.switch_id, entry.cookie, seq)

    def remove_cookie(self, cookie: str) -> int:
        before = len(self._entries)
        self._entries = [(s, e) for s, e in self._entries if e.cookie != cookie]
        return before - len(self._entries)

    def entries(self, owner: str | None = None) -> list[FlowEntry]:
        out = [e for _, e in self._entries]
        if owner is not None:
            out = [e for e in out if e.owner == owner]
        return out

    def classify(self, h: HeaderTuple) -> FlowEntry | None:
        """Highest-priority matching entry; earliest installed wins ties."""
        best: tuple[int, int] | None = None
        best_entry = None
        for seq, entry in self._entries:
            if not entry.match.matches(h):
                continue
            rank = (-entry.priority, seq)
            if best is None or rank < best:
                best = rank
                best_entry = entry
        return best_entry

    def dump(self) -> str:
        """One entry per line: priority|owner|match-fields|actions|cookie."""
        lines = []
        for _, e in self._entries:
            fields = e.match.specified_fields()
            match_txt = ",".join(f"{k}={_fmt_value(k, v)}" for k, v in
                                 sorted(fields.items())) or "*"
            act_txt = ",".join(_fmt_action(a) for a in e.actions) or "-"
            lines.append(f"{e.priority}|{e.owner}|{match_txt}|{act_txt}|{e.cookie}")
        return "\n".join(lines)


def _fmt_value(field: str, value) -> str:
    if field in ("ip_src", "ip_dst"):
        return format_ip4(value)
    if field == "tcp_options":
        return "+".join(sorted(value)) or "none"
    return str(value)


def _fmt_action(a: Action) -> str:
    if isinstance(a, Output):
        return f"output:{a.port}"
    if isinstance(a, SetField):
        return f"set:{a.field}={_fmt_value(a.field, a.value)}"
    return "drop"


@dataclass(frozen=True)
class TraceStep:
    switch: str
    cookie: str
    header: HeaderTuple
    out_link: str | None


@dataclass(frozen=True)
class Terminal:
    kind: str  # delivered | dropped | packet_in
    node: str | None = None
    looped: bool = False


@dataclass(frozen=True)
class ForwardTrace:
    steps: tuple[TraceStep, ...]
    terminal: Terminal

    def delivered_to(self) -> str | None:
        return self.terminal.node if self.terminal.kind == "delivered" else None

    def link_sequence(self) -> list[str]:
        return [s.out_link for s in self.steps if s.out_link is not None]


def forward(t: Topology, tables: dict[str, SwitchTable],
            ingress: tuple[str, int], h: HeaderTuple,
            link_up: frozenset[str] | None = None,
            hop_limit: int = HOP_LIMIT) -> ForwardTrace:
    """Walk a header through the switch tables from an ingress port.

    Stops at host delivery, an explicit drop, a table miss (reported as
    packet_in at that switch) or the hop limit (reported as a drop with
    the loop flag set).  Traffic entering a downed link is dropped.
    """
    switch, port = ingress
    if t.is_host(switch):
        raise UnknownNodeError(f"ingress {switch!r} is a host, not a switch")
    t.link_at_port(switch, port)
    h = h.with_field("in_port", port)
    steps: list[TraceStep] = []
    for _ in range(hop_limit):
        table = tables.get(switch)
        entry = table.classify(h) if table is not None else None
        if entry is None:
            return ForwardTrace(tuple(steps), Terminal("packet_in", switch))
        out_port = None
        for action in entry.actions:
            if isinstance(action, Drop):
                steps.append(TraceStep(switch, entry.cookie, h, None))
                return ForwardTrace(tuple(steps), Terminal("dropped"))
            if isinstance(action, SetField):
                h = h.with_field(action.field, action.value)
            elif isinstance(action, Output):
                out_port = action.port
        if out_port is None:
            steps.append(TraceStep(switch, entry.cookie, h, None))
            return ForwardTrace(tuple(steps), Terminal("dropped"))
        try:
            link = t.link_at_port(switch, out_port)
        except UnknownLinkError:
            raise DirectiveError(
                f"entry {entry.cookie!r} on {switch!r} outputs to "
                f"nonexistent port {out_port}") from None
        steps.append(TraceStep(switch, entry.cookie, h, link.id))
        if link_up is not None and link.id not in link_up:
            return ForwardTrace(tuple(steps), Terminal("dropped"))
        peer = link.other_end(switch)
        if t.is_host(peer):
            return ForwardTrace(tuple(steps), Terminal("delivered", node=peer))
        switch = peer
        h = h.with_field("in_port", t.port_of(peer, link.id))
    return ForwardTrace(tuple(steps), Terminal("dropped", looped=True))
