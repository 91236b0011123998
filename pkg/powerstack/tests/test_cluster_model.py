import pytest

from powerstack.cluster_model import (
    ComponentKind, ComponentSpec, NodeSpec, PowerState, default_cluster_spec, dump_cluster_spec,
    load_cluster_spec, peak_power, validate,
)
from powerstack.errors import ConfigError
from powerstack.powercap import set_component_state

CLUSTER_INI = """\
[system]
system_cap_w = 20000
rack_cap_w = 8000

[racks]
r1
r2

[nodes]
n1 = r1
n2 = r1
n3 = r2

[node n3]
max_power_w = 1500
gpu = 0
"""


def test_default_node_idle_power():
    node = default_cluster_spec().nodes[0]
    # chassis 100 + 2 CPUs at 50 + 4 GPUs at 50
    assert node.idle_power == 400.0
    assert node.peak_power == 2000.0


def test_default_cluster_shape():
    spec = default_cluster_spec()
    assert len(spec.nodes) == 45
    assert spec.racks == ('r1', 'r2', 'r3')
    assert len(spec.nodes_in_rack('r2')) == 15
    assert spec.system_cap == 90000.0
    assert peak_power(spec) == 90000.0
    assert validate(spec) == []


def test_channel_names_numbered_per_kind():
    node = default_cluster_spec(n_nodes=1).nodes[0]
    assert node.channel_names() == ['cpu0', 'cpu1', 'gpu0', 'gpu1', 'gpu2', 'gpu3']


def test_load_cluster_spec_with_override():
    spec = load_cluster_spec(CLUSTER_INI)
    assert spec.node_ids == ['n1', 'n2', 'n3']
    n3 = spec.node('n3')
    assert n3.rack_id == 'r2'
    assert n3.node_max_power == 1500.0
    assert n3.idle_power == 200.0
    assert [c.kind for c in n3.components] == [ComponentKind.CPU, ComponentKind.CPU]


def test_validate_reports_rack_over_cap():
    spec = load_cluster_spec(CLUSTER_INI.replace('rack_cap_w = 8000', 'rack_cap_w = 3000'))
    problems = validate(spec)
    assert problems == ['rack r1: 4000 W exceeds rack cap 3000 W']


def test_dump_then_load_is_identity():
    spec = load_cluster_spec(CLUSTER_INI)
    assert load_cluster_spec(dump_cluster_spec(spec)) == spec


def test_unknown_key_reports_line():
    with pytest.raises(ConfigError) as exc:
        load_cluster_spec("[system]\nsystem_cap_w = 1\nbogus = 2\n")
    assert exc.value.lineno == 3
    assert 'bogus' in str(exc.value)


def test_duplicate_node_id_rejected():
    with pytest.raises(ConfigError, match="duplicate node_id 'n1'") as exc:
        load_cluster_spec("[racks]\nr1\n\n[nodes]\nn1 = r1\nn1 = r1\n")
    assert exc.value.lineno == 6


def test_unknown_rack_rejected():
    with pytest.raises(ConfigError, match="unknown rack 'r9'") as exc:
        load_cluster_spec("[racks]\nr1\n\n[nodes]\nn1 = r9\n")
    assert exc.value.lineno == 5


def test_no_nodes_rejected():
    with pytest.raises(ConfigError, match='no nodes'):
        load_cluster_spec("[racks]\nr1\n")


def test_unknown_section_rejected():
    with pytest.raises(ConfigError, match='unknown section'):
        load_cluster_spec("[racks]\nr1\n[cooling]\nfans = 4\n")


def test_component_power_order_enforced():
    with pytest.raises(ConfigError):
        ComponentSpec(ComponentKind.GPU, idle_power=300.0, max_power=100.0)


def test_sleeping_node_not_allowed():
    with pytest.raises(ConfigError):
        NodeSpec('n1', 'r1', state=PowerState.SLEEP)


def test_gating_lowers_idle_power():
    node = default_cluster_spec(n_nodes=1).nodes[0]
    gpu = node.channel_names().index('gpu0')
    asleep = set_component_state(node, gpu, PowerState.SLEEP)
    assert asleep.idle_power == 400.0 - 50.0 + 10.0
    off = set_component_state(asleep, gpu + 1, PowerState.OFF)
    assert off.idle_power == 400.0 - 50.0 + 10.0 - 50.0
    # the original spec is untouched
    assert node.idle_power == 400.0


def test_fully_gated_node_peak_is_idle():
    node = default_cluster_spec(n_nodes=1).nodes[0]
    for index in range(len(node.components)):
        node = set_component_state(node, index, PowerState.SLEEP)
    assert node.idle_power == 100.0 + 6 * 10.0
    assert node.peak_power == node.idle_power


def test_off_node_draws_nothing():
    spec = default_cluster_spec(n_nodes=2)
    off = NodeSpec('node01', 'r1', spec.nodes[0].components, state=PowerState.OFF)
    spec = spec.with_node(off)
    assert spec.node('node01').idle_power == 0.0
    assert peak_power(spec) == 2000.0
