import pytest

from powerstack.cluster_model import PowerState, default_cluster_spec
from powerstack.errors import PowerCapError
from powerstack.powercap import (
    ControllerState, NodePowerModel, advance_work, dilated_runtime, node_model_for, node_power,
    set_component_state, step_controller, utilization_for, work_rate,
)

MODEL = NodePowerModel()


def test_power_model_endpoints():
    assert node_power(MODEL, 1.0, 1.0) == 2000.0
    assert node_power(MODEL, 1.0, 0.0) == 400.0
    assert node_power(MODEL, 0.5, 1.0) == 600.0


def test_utilization_inverts_power():
    assert utilization_for(MODEL, 1200.0) == 0.5
    assert utilization_for(MODEL, 100.0) == 0.0
    assert utilization_for(MODEL, 9000.0) == 1.0
    assert node_power(MODEL, 1.0, utilization_for(MODEL, 1234.0)) == pytest.approx(1234.0)


def test_knob_range_enforced():
    with pytest.raises(PowerCapError):
        node_power(MODEL, 0.1, 1.0)
    with pytest.raises(PowerCapError):
        work_rate(MODEL, 1.5)
    with pytest.raises(PowerCapError):
        node_power(MODEL, 1.0, 1.2)


def test_bad_model_rejected():
    with pytest.raises(PowerCapError):
        NodePowerModel(p_idle=2000.0, p_max=2000.0)
    with pytest.raises(PowerCapError):
        NodePowerModel(knob_min=0.0)


def test_model_from_node_spec():
    node = default_cluster_spec(n_nodes=1).nodes[0]
    model = node_model_for(node, alpha=2.0)
    assert (model.p_idle, model.p_max, model.alpha) == (400.0, 2000.0, 2.0)


def test_work_progress():
    assert work_rate(MODEL, 0.5) == 0.5
    assert advance_work(MODEL, 10.0, 0.5, 4.0) == 12.0


def test_dilated_runtime():
    assert dilated_runtime(MODEL, [], 20.0) == 20.0
    # 10 s at full speed, 10 s at half speed, then half speed until done
    assert dilated_runtime(MODEL, [(10.0, 1.0), (10.0, 0.5)], 20.0) == 30.0
    assert dilated_runtime(MODEL, [(10.0, 1.0), (10.0, 0.5)], 5.0) == 5.0


def test_set_point_is_clamped():
    state = ControllerState(2000.0)
    assert state.with_set_point(MODEL, 100.0).set_point_w == 400.0
    assert state.with_set_point(MODEL, 5000.0).set_point_w == 2000.0


def test_controller_converges_to_set_point():
    state = ControllerState(1200.0)
    for _ in range(200):
        measured = node_power(MODEL, state.knob, 1.0)
        state = step_controller(state, MODEL, measured, 1.0)
    assert node_power(MODEL, state.knob, 1.0) == pytest.approx(1200.0, abs=1.0)


def test_controller_lowers_knob_when_over():
    state = step_controller(ControllerState(1200.0), MODEL, 2000.0, 1.0)
    assert state.knob < 1.0
    assert state.integral_term == -800.0


def test_anti_windup_at_upper_limit():
    state = ControllerState(2000.0)
    for _ in range(10):
        state = step_controller(state, MODEL, 1500.0, 1.0)
    assert state.knob == 1.0
    assert state.integral_term == 0.0


def test_anti_windup_at_lower_limit():
    state = ControllerState(400.0, knob=MODEL.knob_min)
    for _ in range(10):
        state = step_controller(state, MODEL, 1000.0, 1.0)
    assert state.knob == MODEL.knob_min
    assert state.integral_term == 0.0


def test_zero_error_is_a_no_op():
    state = ControllerState(1500.0, knob=0.8, integral_term=-3.0)
    assert step_controller(state, MODEL, 1500.0, 1.0) is state


def test_controller_needs_positive_dt():
    with pytest.raises(PowerCapError):
        step_controller(ControllerState(1500.0), MODEL, 1000.0, 0.0)


def test_component_gating_rules():
    node = default_cluster_spec(n_nodes=1).nodes[0]
    with pytest.raises(PowerCapError):
        set_component_state(node, 99, PowerState.SLEEP)
    with pytest.raises(PowerCapError, match='in use'):
        set_component_state(node, 0, PowerState.OFF, in_use=True)
    # sleeping an in-use component is allowed
    assert set_component_state(node, 0, PowerState.SLEEP, in_use=True).idle_power == 360.0


def test_demand_above_set_point_settles_in_band():
    # demand exceeds p_max, so the node runs at full utilisation
    utilization = utilization_for(MODEL, 2400.0)
    state = ControllerState(1600.0)
    measured = []
    for _ in range(60):
        power = node_power(MODEL, state.knob, utilization)
        measured.append(power)
        state = step_controller(state, MODEL, power, 1.0)
        assert MODEL.knob_min <= state.knob <= 1.0
    assert all(abs(p - 1600.0) <= 0.02 * 1600.0 for p in measured[20:])
