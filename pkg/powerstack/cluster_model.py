"""
Machine description for powerstack.

Nodes, their gateable components, racks and the rack/system power caps.
Specs are immutable; component gating produces new NodeSpec values.
"""

import math
import logging
from enum import Enum
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Tuple

from .config import IniDocument, read_ini
from .errors import ConfigError

logger = logging.getLogger(__name__)


class ComponentKind(str, Enum):
    CPU = 'cpu'
    GPU = 'gpu'
    MEM = 'mem'
    OTHER = 'other'


class PowerState(str, Enum):
    ON = 'on'
    SLEEP = 'sleep'
    OFF = 'off'


# kind -> (idle_power, max_power, sleep_power) in watts
COMPONENT_DEFAULTS: Dict[ComponentKind, Tuple[float, float, float]] = {
    ComponentKind.CPU: (50.0, 190.0, 10.0),
    ComponentKind.GPU: (50.0, 300.0, 10.0),
    ComponentKind.MEM: (20.0, 60.0, 5.0),
    ComponentKind.OTHER: (10.0, 40.0, 0.0),
}

# Default per-node composition: 2 CPUs, 4 GPUs
DEFAULT_COMPOSITION: Dict[ComponentKind, int] = {
    ComponentKind.CPU: 2,
    ComponentKind.GPU: 4,
    ComponentKind.MEM: 0,
    ComponentKind.OTHER: 0,
}

DEFAULT_NODE_MAX_POWER = 2000.0
DEFAULT_CHASSIS_POWER = 100.0
DEFAULT_RACK_CAP = 32000.0
DEFAULT_SYSTEM_CAP = 100000.0
DEFAULT_PSU_GAIN = 0.05


@dataclass(frozen=True)
class ComponentSpec:
    """One gateable component of a node (a CPU socket, a GPU, ...)."""
    kind: ComponentKind
    idle_power: float
    max_power: float
    state: PowerState = PowerState.ON
    sleep_power: float = 0.0

    def __post_init__(self):
        if not 0 <= self.sleep_power <= self.idle_power <= self.max_power:
            raise ConfigError(
                f"{self.kind.value} component needs 0 <= sleep ({self.sleep_power}) "
                f"<= idle ({self.idle_power}) <= max ({self.max_power})"
            )

    @property
    def contribution(self) -> float:
        """Watts this component adds to its node's idle power."""
        if self.state is PowerState.ON:
            return self.idle_power
        if self.state is PowerState.SLEEP:
            return self.sleep_power
        return 0.0


@dataclass(frozen=True)
class NodeSpec:
    node_id: str
    rack_id: str
    components: Tuple[ComponentSpec, ...] = ()
    node_idle_power: float = DEFAULT_CHASSIS_POWER  # chassis residual
    node_max_power: float = DEFAULT_NODE_MAX_POWER
    state: PowerState = PowerState.ON

    def __post_init__(self):
        if not self.node_id:
            raise ConfigError("empty node_id")
        if self.node_max_power <= 0:
            raise ConfigError(f"node {self.node_id}: max_power_w must be positive")
        if self.node_idle_power < 0:
            raise ConfigError(f"node {self.node_id}: idle_power_w must be >= 0")
        if self.state is PowerState.SLEEP:
            raise ConfigError(f"node {self.node_id}: nodes are either on or off")
        object.__setattr__(self, 'components', tuple(self.components))

    @property
    def idle_power(self) -> float:
        """Chassis residual plus the gated contribution of every component."""
        if self.state is PowerState.OFF:
            return 0.0
        return self.node_idle_power + math.fsum(c.contribution for c in self.components)

    @property
    def peak_power(self) -> float:
        if self.state is PowerState.OFF:
            return 0.0
        if self.components and all(c.state is not PowerState.ON for c in self.components):
            return self.idle_power
        return self.node_max_power

    def channel_names(self) -> List[str]:
        """Sensor channel per component, numbered within its kind (cpu0, cpu1, gpu0, ...)."""
        seen: Dict[ComponentKind, int] = {}
        names = []
        for component in self.components:
            index = seen.get(component.kind, 0)
            seen[component.kind] = index + 1
            names.append(f"{component.kind.value}{index}")
        return names


@dataclass(frozen=True)
class ClusterSpec:
    nodes: Tuple[NodeSpec, ...]
    racks: Tuple[str, ...]
    rack_cap: float = DEFAULT_RACK_CAP
    system_cap: float = DEFAULT_SYSTEM_CAP
    psu_efficiency_gain: float = DEFAULT_PSU_GAIN
    _index: Dict[str, NodeSpec] = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, 'nodes', tuple(self.nodes))
        object.__setattr__(self, 'racks', tuple(self.racks))
        if self.system_cap <= 0:
            raise ConfigError("system_cap_w must be positive")
        if self.rack_cap <= 0:
            raise ConfigError("rack_cap_w must be positive")
        if not 0 <= self.psu_efficiency_gain < 1:
            raise ConfigError("psu_efficiency_gain must be in [0, 1)")
        if len(set(self.racks)) != len(self.racks):
            raise ConfigError("duplicate rack id")

        index = {}
        declared = set(self.racks)
        for node in self.nodes:
            if node.node_id in index:
                raise ConfigError(f"duplicate node_id '{node.node_id}'")
            if node.rack_id not in declared:
                raise ConfigError(f"node {node.node_id}: unknown rack '{node.rack_id}'")
            index[node.node_id] = node
        object.__setattr__(self, '_index', index)

    def node(self, node_id: str) -> NodeSpec:
        return self._index[node_id]

    @property
    def node_ids(self) -> List[str]:
        return [n.node_id for n in self.nodes]

    def nodes_in_rack(self, rack_id: str) -> List[NodeSpec]:
        return [n for n in self.nodes if n.rack_id == rack_id]

    def with_node(self, node: NodeSpec) -> 'ClusterSpec':
        """Copy of this spec with one node replaced (same node_id)."""
        nodes = tuple(node if n.node_id == node.node_id else n for n in self.nodes)
        return replace(self, nodes=nodes)


def make_components(
    composition: Optional[Dict[ComponentKind, int]] = None,
    powers: Optional[Dict[ComponentKind, Tuple[float, float, float]]] = None,
) -> Tuple[ComponentSpec, ...]:
    """Components in canonical kind order (cpu, gpu, mem, other)."""
    composition = DEFAULT_COMPOSITION if composition is None else composition
    powers = COMPONENT_DEFAULTS if powers is None else powers
    components = []
    for kind in ComponentKind:
        idle, peak, sleep = powers[kind]
        for _ in range(composition.get(kind, 0)):
            components.append(ComponentSpec(kind, idle, peak, PowerState.ON, sleep))
    return tuple(components)


def default_cluster_spec(n_nodes: int = 45, nodes_per_rack: int = 15) -> ClusterSpec:
    """The default machine: 45 nodes of 2 kW in racks of 15, 90 kW system cap."""
    n_racks = max(1, math.ceil(n_nodes / nodes_per_rack))
    racks = tuple(f"r{i + 1}" for i in range(n_racks))
    width = max(2, len(str(n_nodes)))
    components = make_components()
    nodes = tuple(
        NodeSpec(f"node{i + 1:0{width}d}", racks[i // nodes_per_rack], components)
        for i in range(n_nodes)
    )
    return ClusterSpec(nodes=nodes, racks=racks, system_cap=90000.0)


def _count(doc: IniDocument, section: str, key: str, default: int) -> int:
    value = doc.get_int(section, key, default)
    if value < 0:
        raise ConfigError(f"[{section}] {key} must be >= 0", doc.lineno(section, key))
    return value


def load_cluster_spec(text: str) -> ClusterSpec:
    """
    Build a ClusterSpec from INI text.

    Raises:
        ConfigError: parse error, unknown key or section, duplicate node_id,
            unknown rack, or no nodes declared
    """
    doc = read_ini(text)

    rack_cap = doc.get_float('system', 'rack_cap_w', DEFAULT_RACK_CAP)
    system_cap = doc.get_float('system', 'system_cap_w', DEFAULT_SYSTEM_CAP)
    gain = doc.get_float('system', 'psu_efficiency_gain', DEFAULT_PSU_GAIN)

    racks = []
    for rack in doc.keys('racks'):
        if doc.raw('racks', rack) is not None:
            raise ConfigError(f"rack '{rack}' takes no value", doc.lineno('racks', rack))
        racks.append(rack)

    powers = dict(COMPONENT_DEFAULTS)
    for kind in ComponentKind:
        section = f"component {kind.value}"
        idle, peak, sleep = powers[kind]
        powers[kind] = (
            doc.get_float(section, 'idle_power_w', idle),
            doc.get_float(section, 'max_power_w', peak),
            doc.get_float(section, 'sleep_power_w', sleep),
        )
    for section in doc.sections():
        if section.startswith('component ') and section[10:].strip() not in {k.value for k in ComponentKind}:
            raise ConfigError(f"unknown component kind in [{section}]", doc.lineno(section))

    defaults = {
        'max_power_w': doc.get_float('node_defaults', 'max_power_w', DEFAULT_NODE_MAX_POWER),
        'idle_power_w': doc.get_float('node_defaults', 'idle_power_w', DEFAULT_CHASSIS_POWER),
    }
    default_counts = {
        kind: _count(doc, 'node_defaults', kind.value, DEFAULT_COMPOSITION[kind])
        for kind in ComponentKind
    }

    # node_id -> (rack, line where the rack was named)
    declared: Dict[str, Tuple[str, Optional[int]]] = {}
    for node_id in doc.keys('nodes'):
        rack = doc.raw('nodes', node_id)
        lineno = doc.lineno('nodes', node_id)
        if not rack:
            raise ConfigError(f"node '{node_id}' has no rack", lineno)
        declared[node_id] = (rack, lineno)

    overrides = {}
    for section in doc.sections():
        if not section.startswith('node '):
            continue
        node_id = section[5:].strip()
        rack = doc.raw(section, 'rack')
        if rack:
            declared[node_id] = (rack, doc.lineno(section, 'rack'))
        elif node_id not in declared:
            raise ConfigError(f"node '{node_id}' has no rack", doc.lineno(section))
        overrides[node_id] = section

    if not declared:
        raise ConfigError("no nodes declared", doc.lineno('nodes'))

    rack_set = set(racks)
    nodes = []
    for node_id, (rack, lineno) in declared.items():
        if rack not in rack_set:
            raise ConfigError(f"node {node_id}: unknown rack '{rack}'", lineno)
        section = overrides.get(node_id)
        if section is None:
            max_power, idle_power, counts = defaults['max_power_w'], defaults['idle_power_w'], default_counts
        else:
            max_power = doc.get_float(section, 'max_power_w', defaults['max_power_w'])
            idle_power = doc.get_float(section, 'idle_power_w', defaults['idle_power_w'])
            counts = {kind: _count(doc, section, kind.value, default_counts[kind]) for kind in ComponentKind}
        try:
            nodes.append(NodeSpec(node_id, rack, make_components(counts, powers), idle_power, max_power))
        except ConfigError as e:
            raise ConfigError(str(e), lineno)

    spec = ClusterSpec(
        nodes=tuple(nodes),
        racks=tuple(racks),
        rack_cap=rack_cap,
        system_cap=system_cap,
        psu_efficiency_gain=gain,
    )
    logger.debug(f"Loaded cluster: {len(spec.nodes)} nodes in {len(spec.racks)} racks")
    return spec


def _fmt(value: float) -> str:
    return str(int(value)) if float(value).is_integer() else repr(float(value))


def dump_cluster_spec(spec: ClusterSpec) -> str:
    """
    Serialise a spec to the INI schema accepted by load_cluster_spec.

    Only specs the schema can express are accepted: nodes ON, components ON
    in canonical order and sharing one power envelope per kind.
    """
    powers: Dict[ComponentKind, Tuple[float, float, float]] = {}
    for node in spec.nodes:
        if node.state is not PowerState.ON:
            raise ConfigError(f"node {node.node_id} is off; power states are not serialisable")
        for component in node.components:
            if component.state is not PowerState.ON:
                raise ConfigError(f"node {node.node_id} has gated components; not serialisable")
            envelope = (component.idle_power, component.max_power, component.sleep_power)
            if powers.setdefault(component.kind, envelope) != envelope:
                raise ConfigError(f"{component.kind.value} components differ between nodes")

    lines = [
        '[system]',
        f'system_cap_w = {_fmt(spec.system_cap)}',
        f'rack_cap_w = {_fmt(spec.rack_cap)}',
        f'psu_efficiency_gain = {_fmt(spec.psu_efficiency_gain)}',
        '',
        '[racks]',
        *spec.racks,
        '',
    ]
    for kind in ComponentKind:
        idle, peak, sleep = powers.get(kind, COMPONENT_DEFAULTS[kind])
        lines += [
            f'[component {kind.value}]',
            f'idle_power_w = {_fmt(idle)}',
            f'max_power_w = {_fmt(peak)}',
            f'sleep_power_w = {_fmt(sleep)}',
            '',
        ]
    for node in spec.nodes:
        counts = {kind: 0 for kind in ComponentKind}
        for component in node.components:
            counts[component.kind] += 1
        if tuple(c.kind for c in node.components) != tuple(c.kind for c in make_components(counts, powers)):
            raise ConfigError(f"node {node.node_id}: components not in canonical order")
        lines += [
            f'[node {node.node_id}]',
            f'rack = {node.rack_id}',
            f'max_power_w = {_fmt(node.node_max_power)}',
            f'idle_power_w = {_fmt(node.node_idle_power)}',
            *(f'{kind.value} = {counts[kind]}' for kind in ComponentKind),
            '',
        ]
    return '\n'.join(lines)


def validate(spec: ClusterSpec) -> List[str]:
    """Rack power-bank check. The system cap is the dispatcher's business, not checked here."""
    violations = []
    for rack in spec.racks:
        total = math.fsum(n.node_max_power for n in spec.nodes_in_rack(rack))
        if total > spec.rack_cap:
            violations.append(
                f"rack {rack}: {_fmt(total)} W exceeds rack cap {_fmt(spec.rack_cap)} W"
            )
    return violations


def peak_power(spec: ClusterSpec) -> float:
    return math.fsum(node.peak_power for node in spec.nodes)
