"""Bandwidth/latency-aware routing controller.

Flows are classified bandwidth-intensive or latency-oriented, either by
application declarations or by a destination-port heuristic, and each
class gets the path that optimizes its own metric from smoothed monitor
statistics.  Rerouting is damped by a dwell time and a minimum relative
improvement so the controller never flaps.
"""

from __future__ import annotations

from dataclasses import dataclass

from .controller_core import (
    BaselineController,
    ControllerConfig,
    Directive,
    EpochTick,
    FlowRecord,
    LinkStats,
    PacketIn,
)
from .dataplane import HeaderTuple, MatchPattern
from .errors import InvalidPathError
from .netsim import TrafficFlow, allocate_max_min, flow_rtt_ms
from .topo import Path, Topology, k_shortest_paths

BANDWIDTH = "bandwidth_intensive"
LATENCY = "latency_oriented"
UNCLASSIFIED = "unclassified"
FLOW_CLASSES = frozenset({BANDWIDTH, LATENCY, UNCLASSIFIED})

# Destination ports treated as bulk transfer when no declaration matches:
# ftp-data, GridFTP control, iperf2, iperf3.
DEFAULT_BULK_PORTS = frozenset({20, 2811, 5001, 5201})

CANDIDATE_K = 8
REROUTE_IMPROVEMENT = 0.20
REROUTE_DWELL_EPOCHS = 5


@dataclass(frozen=True)
class AppDeclaration:
    """Application-supplied classification, effective from at_epoch on."""

    match: MatchPattern
    flow_class: str
    at_epoch: int = 0

    def __post_init__(self):
        if self.flow_class not in FLOW_CLASSES:
            raise ValueError(f"unknown flow class {self.flow_class!r}")


@dataclass(frozen=True)
class PathScore:
    path: Path
    residual_bottleneck_mbps: float
    total_rtt_ms: float


def classify(h: HeaderTuple, declarations: list[AppDeclaration],
             bulk_ports: frozenset[int] = DEFAULT_BULK_PORTS) -> str:
    """Most-specific matching declaration wins; later declarations break
    ties.  Without a declaration, bulk-port destinations are treated as
    bandwidth-intensive and everything else as latency-oriented."""
    best_rank = None
    best_class = None
    for index, decl in enumerate(declarations):
        if not decl.match.matches(h):
            continue
        rank = (len(decl.match.specified_fields()), index)
        if best_rank is None or rank > best_rank:
            best_rank = rank
            best_class = decl.flow_class
    if best_class is not None:
        return best_class
    return BANDWIDTH if h.tp_dst in bulk_ports else LATENCY


def score_path(p: Path, stats: dict[str, LinkStats]) -> PathScore | None:
    """Score from smoothed stats; None if any link is down or unsampled."""
    residual = None
    rtt = 0.0
    for link_id in p.hops:
        sample = stats.get(link_id)
        if sample is None or sample.is_down():
            return None
        rtt += sample.rtt_ms
        residual = sample.residual_mbps if residual is None \
            else min(residual, sample.residual_mbps)
    return PathScore(p, residual if residual is not None else 0.0, rtt)


def _rank(score: PathScore, flow_class: str) -> tuple:
    if flow_class == BANDWIDTH:
        return (-score.residual_bottleneck_mbps, score.total_rtt_ms,
                score.path.hops)
    return (score.total_rtt_ms, -score.residual_bottleneck_mbps,
            score.path.hops)


def select_path(t: Topology, stats: dict[str, LinkStats], src: str, dst: str,
                flow_class: str, k: int = CANDIDATE_K) -> Path | None:
    """Best path for the class over the k-shortest candidate set.

    Bandwidth-intensive flows maximize the residual bottleneck (ties go
    to lower rtt, then the lexicographically smaller link sequence);
    latency-oriented and unclassified flows minimize total rtt (ties go
    to higher residual, then lexicographic).
    """
    scored = [score_path(p, stats)
              for p in k_shortest_paths(t, src, dst, k, "hops")]
    scored = [s for s in scored if s is not None]
    if not scored:
        return None
    return min(scored, key=lambda s: _rank(s, flow_class)).path


class OverseerController(BaselineController):
    """Class-aware routing on top of the baseline flow bookkeeping."""

    name = "overseer"

    def __init__(self, topology: Topology, config: ControllerConfig):
        super().__init__(topology, config)
        self.declarations: list[AppDeclaration] = sorted(
            config.declarations, key=lambda d: d.at_epoch)
        self.bulk_ports = frozenset(
            config.settings.get("bulk_ports", DEFAULT_BULK_PORTS))
        self.improvement = float(
            config.settings.get("reroute_improvement", REROUTE_IMPROVEMENT))
        self.dwell = int(config.settings.get("reroute_dwell",
                                             REROUTE_DWELL_EPOCHS))
        self.candidate_k = int(config.settings.get("candidate_k", CANDIDATE_K))
        self.next_epoch = 0
        self.flow_class: dict[str, str] = {}
        self.routed_at: dict[str, int] = {}

    # -- classification helpers

    def active_declarations(self) -> list[AppDeclaration]:
        return [d for d in self.declarations if d.at_epoch <= self.next_epoch]

    def classify_flow(self, rec: FlowRecord) -> str:
        return classify(rec.header, self.active_declarations(), self.bulk_ports)

    # -- routing hooks

    def on_packet_in(self, ev: PacketIn) -> list[Directive]:
        directives = super().on_packet_in(ev)
        if ev.flow_id in self.flows:
            self.routed_at[ev.flow_id] = self.next_epoch
        return directives

    def select_route(self, rec: FlowRecord) -> Path | None:
        flow_class = self.classify_flow(rec)
        self.flow_class[rec.flow_id] = flow_class
        return select_path(self.topology, self.stats, rec.src, rec.dst,
                           flow_class, self.candidate_k)

    def on_flow_ended(self, ev) -> list[Directive]:
        self.flow_class.pop(ev.flow_id, None)
        self.routed_at.pop(ev.flow_id, None)
        return super().on_flow_ended(ev)

    def on_epoch_tick(self, ev: EpochTick) -> list[Directive]:
        directives = self.reroute(ev.epoch)
        self.next_epoch = ev.epoch + 1
        return directives

    # -- rerouting with hysteresis

    def reroute(self, epoch: int) -> list[Directive]:
        """Move a flow only when forced (broken or unrouted path) or when
        a candidate improves its class metric by at least the configured
        fraction after the dwell time."""
        directives: list[Directive] = []
        own_rates = self._estimate_rates()
        for flow_id in sorted(self.flows):
            rec = self.flows[flow_id]
            broken = rec.path is None or any(h in self.down for h in rec.path.hops)
            if broken:
                directives.extend(self.route_flow(rec))
                self.routed_at[flow_id] = epoch
                continue
            if epoch - self.routed_at.get(flow_id, epoch) < self.dwell:
                continue
            flow_class = self.classify_flow(rec)
            self.flow_class[flow_id] = flow_class
            candidate = select_path(self.topology, self.stats, rec.src,
                                    rec.dst, flow_class, self.candidate_k)
            if candidate is None or candidate.hops == rec.path.hops:
                continue
            if self._improves(rec, candidate, flow_class, own_rates):
                directives.extend(self.apply_route(rec, candidate))
                self.routed_at[flow_id] = epoch
        return directives

    def _improves(self, rec: FlowRecord, candidate: Path, flow_class: str,
                  own_rates: dict[str, float]) -> bool:
        cand = score_path(candidate, self.stats)
        if cand is None:
            return False
        if flow_class == BANDWIDTH:
            # The flow's class metric on its current path is the share it
            # already achieves; raw residual there would count the flow's
            # own traffic against itself and cause flapping.
            current = own_rates.get(rec.flow_id, 0.0)
            if current <= 0.0:
                return cand.residual_bottleneck_mbps > 0.0
            return (cand.residual_bottleneck_mbps
                    >= (1.0 + self.improvement) * current)
        try:
            current_rtt = flow_rtt_ms(self.topology, rec.path)
        except InvalidPathError:
            return True
        return cand.total_rtt_ms <= (1.0 - self.improvement) * current_rtt

    def _estimate_rates(self) -> dict[str, float]:
        """Model the fair-share allocation of the flows this controller
        routed (caps unknown to the control plane, so uncapped)."""
        stubs = []
        for flow_id in sorted(self.flows):
            rec = self.flows[flow_id]
            if rec.path is None or any(h in self.down for h in rec.path.hops):
                continue
            stubs.append(TrafficFlow(flow_id, rec.src, rec.dst, path=rec.path))
        if not stubs:
            return {}
        return allocate_max_min(self.topology, stubs)
