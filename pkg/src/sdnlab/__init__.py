"""Deterministic SDN laboratory.

Models an OpenFlow testbed as an immutable topology, flow-table
switches, a fluid max-min traffic simulator and a family of pure
controllers (shortest-path baseline, bandwidth/latency-aware routing,
multipath stream striping, MPTCP path sets) plus multi-domain slicing
with per-domain address translation.
"""

from .topo import (
    Link,
    Node,
    Path,
    PathMetrics,
    Topology,
    k_shortest_paths,
    load_topology,
    max_disjoint_paths,
    path_metrics,
)
from .dataplane import (
    FlowEntry,
    ForwardTrace,
    HeaderTuple,
    MatchPattern,
    SwitchTable,
    forward,
    ip4,
)
from .netsim import (
    EpochAllocation,
    SimEvent,
    Simulation,
    TrafficFlow,
    allocate_max_min,
    flow_rtt_ms,
    run,
)
from .controller_core import (
    AddressBook,
    BaselineController,
    Controller,
    ControllerConfig,
    Monitor,
    install_path,
)
from .overseer import AppDeclaration, OverseerController, classify, select_path
from .multipath import (
    MptcpController,
    PathSet,
    StripingController,
    TransferRequest,
    assign_stream,
    build_path_set,
    request_paths,
)
from .slicing import DomainProxy, SliceFabric, SliceRegistry, SliceSpec
from .harness import Scenario, compare, load_scenario, main, run_scenario

__version__ = "0.1.0"
