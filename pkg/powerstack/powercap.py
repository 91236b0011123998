"""
Node-level reactive power capping.

A continuous performance knob in [knob_min, 1] scales the dynamic part of
node power as knob**alpha and work progress as knob**beta. A PI controller
with anti-windup moves the knob to track a power set point.
"""

import logging
from dataclasses import dataclass, replace
from typing import Iterable, Tuple

from .cluster_model import NodeSpec, PowerState
from .errors import PowerCapError

logger = logging.getLogger(__name__)

# Slack for knob/utilisation range checks against float round-off
RANGE_EPS = 1e-12


@dataclass(frozen=True)
class NodePowerModel:
    p_idle: float = 400.0
    p_max: float = 2000.0
    alpha: float = 3.0
    beta: float = 1.0
    knob_min: float = 0.3

    def __post_init__(self):
        if not self.p_idle < self.p_max:
            raise PowerCapError(f"p_idle ({self.p_idle}) must be below p_max ({self.p_max})")
        if self.alpha <= 0 or self.beta <= 0:
            raise PowerCapError("alpha and beta must be positive")
        if not 0 < self.knob_min <= 1:
            raise PowerCapError(f"knob_min must be in (0, 1], got {self.knob_min}")

    @property
    def dynamic_range(self) -> float:
        return self.p_max - self.p_idle

    def clamp_knob(self, knob: float) -> float:
        return min(1.0, max(self.knob_min, knob))


def node_model_for(node: NodeSpec, alpha: float = 3.0, beta: float = 1.0, knob_min: float = 0.3) -> NodePowerModel:
    """Power model of a cluster node: idle from its gated components, max from its envelope."""
    return NodePowerModel(node.idle_power, node.node_max_power, alpha, beta, knob_min)


def _check_knob(model: NodePowerModel, knob: float):
    if not model.knob_min - RANGE_EPS <= knob <= 1.0 + RANGE_EPS:
        raise PowerCapError(f"knob {knob} outside [{model.knob_min}, 1]")


def node_power(model: NodePowerModel, knob: float, utilization: float) -> float:
    """P = p_idle + (p_max - p_idle) * utilization * knob**alpha"""
    _check_knob(model, knob)
    if not -RANGE_EPS <= utilization <= 1.0 + RANGE_EPS:
        raise PowerCapError(f"utilization {utilization} outside [0, 1]")
    return model.p_idle + model.dynamic_range * utilization * knob ** model.alpha


def utilization_for(model: NodePowerModel, demand_w: float) -> float:
    """Utilisation at which an uncapped node draws demand_w; clamped to [0, 1]."""
    return min(1.0, max(0.0, (demand_w - model.p_idle) / model.dynamic_range))


def work_rate(model: NodePowerModel, knob: float) -> float:
    _check_knob(model, knob)
    return knob ** model.beta


def advance_work(model: NodePowerModel, work_done_s: float, knob: float, dt_s: float) -> float:
    """Nominal seconds of work completed after running dt_s at a fixed knob."""
    return work_done_s + work_rate(model, knob) * dt_s


def dilated_runtime(model: NodePowerModel, knob_trajectory: Iterable[Tuple[float, float]], nominal_s: float) -> float:
    """
    Wall time to finish nominal_s of work under a knob trajectory.

    knob_trajectory yields (duration_s, knob) segments; the last knob is held
    until the work is done.
    """
    if nominal_s <= 0:
        return 0.0
    elapsed = 0.0
    done = 0.0
    knob = 1.0
    for duration, knob in knob_trajectory:
        rate = work_rate(model, knob)
        if done + rate * duration >= nominal_s:
            return elapsed + (nominal_s - done) / rate
        done += rate * duration
        elapsed += duration
    return elapsed + (nominal_s - done) / work_rate(model, knob)


@dataclass(frozen=True)
class ControllerState:
    set_point_w: float
    knob: float = 1.0
    integral_term: float = 0.0  # W*s
    kp: float = 0.5
    ki: float = 0.2

    def with_set_point(self, model: NodePowerModel, set_point_w: float) -> 'ControllerState':
        """New target, clamped into [p_idle, p_max]."""
        return replace(self, set_point_w=min(model.p_max, max(model.p_idle, set_point_w)))


def step_controller(state: ControllerState, model: NodePowerModel, measured_w: float, dt_s: float) -> ControllerState:
    """
    One PI update.

    The error is normalised by the node's dynamic range. The integral is
    frozen while the knob sits at a limit and the error pushes further into it.
    """
    if dt_s <= 0:
        raise PowerCapError(f"dt_s must be > 0, got {dt_s}")
    error = state.set_point_w - measured_w
    if error == 0:
        return state

    saturated_high = state.knob >= 1.0 and error > 0
    saturated_low = state.knob <= model.knob_min and error < 0
    integral = state.integral_term
    if not (saturated_high or saturated_low):
        integral += error * dt_s

    span = model.dynamic_range
    knob = state.knob + state.kp * error / span + state.ki * integral / span
    return replace(state, knob=model.clamp_knob(knob), integral_term=integral)


def set_component_state(node: NodeSpec, component_index: int, state: PowerState, in_use: bool = False) -> NodeSpec:
    """
    Gate one component; the returned node's idle_power reflects the change.

    Raises:
        PowerCapError: unknown component, or switching off a component in use
    """
    if not 0 <= component_index < len(node.components):
        raise PowerCapError(f"node {node.node_id} has no component {component_index}")
    if state is PowerState.OFF and in_use:
        raise PowerCapError(
            f"node {node.node_id}: component {component_index} is in use and cannot be switched off"
        )
    components = list(node.components)
    components[component_index] = replace(components[component_index], state=state)
    updated = replace(node, components=tuple(components))
    logger.debug(
        f"{node.node_id}: component {component_index} -> {state.value}, idle {updated.idle_power:.1f} W"
    )
    return updated
