"""
Deterministic discrete-event cluster simulator.

Time advances in control ticks (1 s by default). Inside a tick, arrivals,
starts, phase switches and completions happen at exact instants on the
decimated sample grid; at the tick boundary the simulator turns each
node's piecewise-constant power into quantised samples, publishes one
reading per node on the bus, lets the dispatcher react to the measured
system power and steps the node controllers.
"""

import math
import logging
from collections import deque
from dataclasses import dataclass, field
from typing import Deque, Dict, List, Optional, Tuple

import numpy as np

from .accounting import (
    AllocationWindow, EnergyLedger, RunRecord, SystemPowerMeter, close_ledger, integrate, publish_job_energy,
)
from .bus import MessageBus, TelemetryRecorder, encode_sample, sample_topic
from .cluster_model import ClusterSpec, NodeSpec, PowerState, validate
from .config import RunConfig
from .dispatcher import Decision, Dispatcher
from .errors import ConfigError, SimulationError
from .logging_config import log_run_stats
from .powercap import (
    ControllerState, NodePowerModel, node_model_for, node_power, set_component_state, step_controller,
    utilization_for, work_rate,
)
from .predictor import JobRecord, PowerModel, predict, train
from .telemetry import (
    NODE_CHANNEL, NS_PER_S, UW_PER_W, NodeClock, PowerSample, PowerStream, component_breakdown,
    local_reading, quantize, quantize_array, sync, to_global,
)
from .workload import Workload, WorkloadJob

logger = logging.getLogger(__name__)

# Substream indices of the run seed
STREAM_NOISE = 0
STREAM_CLOCKS = 1
STREAM_SYNC = 2

TIER_ORACLE = 'oracle'
STATUS_COMPLETED = 'completed'
STATUS_REJECTED = 'rejected'

# Work (in nominal seconds) below which a phase boundary counts as reached
WORK_EPS = 1e-9


@dataclass(frozen=True)
class JobOutcome:
    job_id: str
    user: str
    app_tag: str
    nodes: int
    submit_ns: int
    predicted_w: float
    tier: str
    status: str
    start_ns: Optional[int] = None
    end_ns: Optional[int] = None
    work_done_s: float = 0.0
    energy_j: float = 0.0
    slowdown_threshold_s: float = 10.0

    @property
    def wait_s(self) -> Optional[float]:
        return None if self.start_ns is None else (self.start_ns - self.submit_ns) / NS_PER_S

    @property
    def runtime_s(self) -> Optional[float]:
        if self.start_ns is None or self.end_ns is None:
            return None
        return (self.end_ns - self.start_ns) / NS_PER_S

    @property
    def bounded_slowdown(self) -> Optional[float]:
        """(wait + run) / max(run, threshold)"""
        if self.runtime_s is None:
            return None
        return (self.wait_s + self.runtime_s) / max(self.runtime_s, self.slowdown_threshold_s)

    @property
    def mean_power_w(self) -> Optional[float]:
        if not self.runtime_s:
            return None
        return self.energy_j / self.runtime_s


@dataclass(frozen=True)
class TimelineRow:
    """`ticks` consecutive control ticks starting at start_ns with identical values."""
    start_ns: int
    ticks: int
    predicted_w: float
    measured_w: float


@dataclass(frozen=True)
class ViolationStats:
    ticks_over: int
    ticks_total: int
    max_overshoot_w: float

    @property
    def fraction(self) -> float:
        return self.ticks_over / self.ticks_total if self.ticks_total else 0.0


@dataclass
class SimReport:
    outcomes: List[JobOutcome]
    timeline: List[TimelineRow]
    violations: ViolationStats
    ledger: EnergyLedger
    decisions: List[Decision]
    history: List[JobRecord]
    makespan_ns: int
    run_end_ns: int
    tick_ns: int
    system_cap_w: float
    seed: int
    directives_issued: int = 0
    unshed_w_max: float = 0.0
    peak_measured_w: float = 0.0
    telemetry_lines: List[str] = field(default_factory=list)

    @property
    def completed(self) -> List[JobOutcome]:
        return [o for o in self.outcomes if o.status == STATUS_COMPLETED]

    def timeline_energy_j(self) -> float:
        tick_s = self.tick_ns / NS_PER_S
        return math.fsum(row.measured_w * row.ticks * tick_s for row in self.timeline)


@dataclass
class _Node:
    base: NodeSpec
    spec: NodeSpec  # current, possibly with idle components gated
    model: NodePowerModel
    controller: ControllerState
    clock: NodeClock
    stream: PowerStream
    job_id: Optional[str] = None
    level_w: float = 0.0
    runs: List[Tuple[int, int, float]] = field(default_factory=list)  # (start_ns, samples, watts) this tick

    @property
    def node_id(self) -> str:
        return self.base.node_id


@dataclass
class _Job:
    job: WorkloadJob
    predicted_w: float
    tier: str
    boundaries: Tuple[float, ...]  # cumulative work at the end of each phase
    nodes: Tuple[str, ...] = ()
    start_ns: Optional[int] = None
    end_ns: Optional[int] = None
    work_done_s: float = 0.0
    phase: int = 0
    rejected: bool = False

    @property
    def phase_power_w(self) -> float:
        return self.job.power_profile()[self.phase][1]


def _gated(node: NodeSpec) -> NodeSpec:
    for index in range(len(node.components)):
        node = set_component_state(node, index, PowerState.SLEEP)
    return node


class ClusterSimulator:
    """One simulation run. Not reusable: build a new simulator per run."""

    def __init__(self, spec: ClusterSpec, config: RunConfig, seed: int, model: Optional[PowerModel] = None):
        problems = validate(spec)
        if problems:
            raise SimulationError("invalid cluster spec: " + "; ".join(problems))
        if not spec.nodes:
            raise SimulationError("cluster has no nodes")
        if seed < 0:
            raise SimulationError(f"seed must be >= 0, got {seed}")

        self.spec = spec
        self.config = config
        self.seed = seed
        self.adc = config.telemetry.adc()
        self.period_ns = self.adc.period_ns
        self.tick_ns = round(config.powercap.control_period_s * NS_PER_S)
        if self.tick_ns <= 0 or self.tick_ns % self.period_ns:
            raise ConfigError(
                f"control period {config.powercap.control_period_s} s is not a multiple "
                f"of the {self.period_ns} ns sample period"
            )
        self.samples_per_tick = self.tick_ns // self.period_ns
        self.tick_s = self.tick_ns / NS_PER_S
        self.root = config.telemetry.topic_root
        self.system_cap_w = (
            config.scheduler.system_cap_w if config.scheduler.system_cap_w is not None else spec.system_cap
        )

        substreams = np.random.SeedSequence(seed).spawn(3)
        self._noise_rng = np.random.default_rng(substreams[STREAM_NOISE])
        self._sync_rng = np.random.default_rng(substreams[STREAM_SYNC])
        clock_rng = np.random.default_rng(substreams[STREAM_CLOCKS])

        pc = config.powercap
        self.nodes: Dict[str, _Node] = {}
        for base in sorted(spec.nodes, key=lambda n: n.node_id):
            node_model = node_model_for(base, pc.alpha, pc.beta, pc.knob_min)
            current = _gated(base) if config.scheduler.gate_idle_components else base
            self.nodes[base.node_id] = _Node(
                base=base,
                spec=current,
                model=node_model,
                controller=ControllerState(node_model.p_max, kp=pc.kp, ki=pc.ki),
                clock=self._initial_clock(clock_rng),
                stream=PowerStream(self.period_ns),
                level_w=current.idle_power,
            )

        self._uw_cache: Dict[float, int] = {}
        self.bus = MessageBus()
        self.meter = SystemPowerMeter(self.bus, self.root)
        self.recorder = TelemetryRecorder(self.bus, f"{self.root}/#") if config.telemetry.record else None
        self.dispatcher = Dispatcher(
            self.nodes.keys(),
            self.system_cap_w,
            node_idle_w={node_id: self._measured_w(n.base.idle_power) for node_id, n in self.nodes.items()},
            backfill=config.scheduler.backfill,
            reactive=config.scheduler.reactive,
        )
        self.model = model if model is not None else train(
            [], self._default_w_per_node(), config.scheduler.safety_margin,
        )

        self.jobs: Dict[str, _Job] = {}
        self.allocations: List[AllocationWindow] = []
        self.timeline: List[TimelineRow] = []
        self._pending_schedule = True
        self._quiet = False
        self._last_event_ns = 0
        self._ticks_over = 0
        self._ticks_total = 0
        self._max_overshoot_w = 0.0
        self._peak_measured_w = 0.0
        self._last_sync_tick: Optional[int] = None

    def _initial_clock(self, rng: np.random.Generator) -> NodeClock:
        tc = self.config.telemetry
        offset = int(rng.integers(-tc.clock_offset_ns, tc.clock_offset_ns + 1)) if tc.clock_offset_ns > 0 else 0
        drift = float(rng.uniform(-tc.clock_drift_ppm, tc.clock_drift_ppm)) if tc.clock_drift_ppm > 0 else 0.0
        return NodeClock(drift_ppm=drift, true_offset_ns=offset)

    def _default_w_per_node(self) -> float:
        if self.config.scheduler.default_w_per_node is not None:
            return self.config.scheduler.default_w_per_node
        return max(n.model.p_max for n in self.nodes.values())

    # -- helpers ----------------------------------------------------------

    def _snap_up(self, t_ns: int) -> int:
        return -(-t_ns // self.period_ns) * self.period_ns

    def _uw(self, watts: float) -> int:
        value = self._uw_cache.get(watts)
        if value is None:
            q = quantize(watts, self.adc)
            if q.saturated:
                logger.warning(f"{watts:.1f} W saturates the ADC at {self.adc.full_scale_w} W")
            value = int(round(q.watts * UW_PER_W))
            self._uw_cache[watts] = value
        return value

    def _measured_w(self, watts: float) -> float:
        """What the noiseless sensor reports for a constant draw of `watts`."""
        return self._uw(watts) / UW_PER_W

    def _oracle_w(self, job: WorkloadJob) -> float:
        """Exact allocation power: what a knob-1 node really reports for this job."""
        per_node = max(
            self._measured_w(node_power(n.model, 1.0, utilization_for(n.model, job.node_power_w)))
            for n in self.nodes.values()
        )
        return per_node * job.request.nodes_requested

    def _rate(self, job: _Job) -> float:
        return min(work_rate(self.nodes[n].model, self.nodes[n].controller.knob) for n in job.nodes)

    def _busy_level(self, node: _Node, job: _Job) -> float:
        utilization = utilization_for(node.model, job.phase_power_w)
        return node_power(node.model, node.controller.knob, utilization)

    def _refresh_levels(self, job: _Job):
        for node_id in job.nodes:
            node = self.nodes[node_id]
            node.level_w = self._busy_level(node, job)

    # -- events -----------------------------------------------------------

    def _submit(self, wj: WorkloadJob, now_ns: int):
        if self.config.scheduler.oracle_predictor:
            predicted, tier = self._oracle_w(wj), TIER_ORACLE
        else:
            predicted, tier = predict(self.model, wj.request)
        cumulative, boundaries = 0.0, []
        for fraction, _ in wj.power_profile():
            cumulative += fraction * wj.runtime_s
            boundaries.append(cumulative)
        boundaries[-1] = wj.runtime_s
        job = _Job(wj, predicted, tier, tuple(boundaries))
        self.jobs[wj.job_id] = job
        if not self.dispatcher.submit(wj.request, predicted, now_ns):
            job.rejected = True
            self._last_event_ns = max(self._last_event_ns, now_ns)

    def _start(self, job_id: str, nodes: Tuple[str, ...], now_ns: int):
        job = self.jobs[job_id]
        if now_ns < job.job.request.submit_time_ns:
            raise SimulationError(f"job {job_id} started before its submission")
        job.nodes = nodes
        job.start_ns = now_ns
        for node_id in nodes:
            node = self.nodes[node_id]
            node.job_id = job_id
            node.spec = node.base
        self._refresh_levels(job)

    def _finish(self, job: _Job, now_ns: int):
        job.end_ns = now_ns
        self.dispatcher.on_job_end(job.job.job_id, now_ns)
        for node_id in job.nodes:
            node = self.nodes[node_id]
            node.job_id = None
            if self.config.scheduler.gate_idle_components:
                node.spec = _gated(node.base)
            node.level_w = node.spec.idle_power
            self.allocations.append(AllocationWindow(job.job.job_id, node_id, job.start_ns, now_ns))
        self._last_event_ns = max(self._last_event_ns, now_ns)
        self._pending_schedule = True

    def _running(self) -> List[_Job]:
        return [self.jobs[job_id] for job_id in sorted(self.dispatcher.state.running)]

    def _crossing_ns(self, job: _Job, cursor: int, rate: float) -> int:
        remaining = job.boundaries[job.phase] - job.work_done_s
        if remaining <= WORK_EPS:
            return cursor
        return cursor + self._snap_up(math.ceil(remaining / rate * NS_PER_S))

    def _next_event_ns(self, cursor: int, arrivals: Deque[WorkloadJob], rates: Dict[str, float]) -> Optional[int]:
        candidates = [self._crossing_ns(job, cursor, rates[job.job.job_id]) for job in self._running()]
        if arrivals:
            candidates.append(max(cursor, self._snap_up(arrivals[0].request.submit_time_ns)))
        return min(candidates) if candidates else None

    def _process_crossings(self, now_ns: int) -> bool:
        changed = False
        for job in self._running():
            boundary = job.boundaries[job.phase]
            if job.work_done_s < boundary - WORK_EPS:
                continue
            changed = True
            job.phase += 1
            if job.phase == len(job.boundaries):
                self._finish(job, now_ns)
            else:
                self._refresh_levels(job)
        return changed

    # -- ticks ------------------------------------------------------------

    def _sync_clocks(self, tick_index: int, now_ns: int):
        interval = self.config.telemetry.sync_interval_s
        due = self._last_sync_tick is None or tick_index - self._last_sync_tick >= interval
        if not due:
            return
        error = self.config.telemetry.sync_error_ns
        for node in self.nodes.values():
            node.clock = sync(node.clock, now_ns, error, self._sync_rng)
        self._last_sync_tick = tick_index

    def _tick(self, t0: int, arrivals: Deque[WorkloadJob], tick_index: int):
        t1 = t0 + self.tick_ns
        self._sync_clocks(tick_index, t0)
        for node in self.nodes.values():
            node.runs = []
        rates = {job.job.job_id: self._rate(job) for job in self._running()}

        had_event = self._pending_schedule
        predicted_area = 0.0
        cursor = t0
        while True:
            while arrivals and self._snap_up(arrivals[0].request.submit_time_ns) <= cursor:
                self._submit(arrivals.popleft(), cursor)
                self._pending_schedule = True
            if self._pending_schedule:
                self._pending_schedule = False
                had_event = True
                for started in self.dispatcher.schedule_tick(cursor):
                    self._start(started.job_id, started.nodes, cursor)
                    rates[started.job_id] = self._rate(self.jobs[started.job_id])
            if cursor == t1:
                break

            nxt = self._next_event_ns(cursor, arrivals, rates)
            nxt = t1 if nxt is None else min(max(nxt, cursor), t1)
            if nxt > cursor:
                count = (nxt - cursor) // self.period_ns
                for node in self.nodes.values():
                    node.runs.append((cursor, count, node.level_w))
                dt_s = (nxt - cursor) / NS_PER_S
                for job in self._running():
                    job.work_done_s += rates[job.job.job_id] * dt_s
                predicted_area += self.dispatcher.state.predicted_load_w * (nxt - cursor)
                cursor = nxt
            if self._process_crossings(cursor):
                had_event = True

        measured_w = self._close_tick(t0)
        knobs_changed = self._control(t1)
        self._record_tick(t0, 1, predicted_area / self.tick_ns, measured_w)
        self._quiet = (
            not had_event
            and not knobs_changed
            and not self._pending_schedule
            and not self.dispatcher.active_caps
            and self.adc.noise_amplitude_w == 0
            and measured_w <= self.system_cap_w
            and all(n.controller.knob >= 1.0 and n.controller.set_point_w >= n.model.p_max
                    for n in self.nodes.values())
        )

    def _close_tick(self, t0: int) -> float:
        """Append this tick's samples to every stream and publish the tick means."""
        total_units = 0
        noisy = self.adc.noise_amplitude_w > 0
        for node in self.nodes.values():
            if noisy:
                levels = np.repeat([w for _, _, w in node.runs], [c for _, c, _ in node.runs])
                noise = self._noise_rng.uniform(-self.adc.noise_amplitude_w, self.adc.noise_amplitude_w, levels.size)
                watts, saturated = quantize_array(levels + noise, self.adc)
                if saturated:
                    logger.warning(f"{node.node_id}: {saturated} samples saturated the ADC")
                values = np.rint(watts * UW_PER_W).astype(np.int64)
                node.stream.append_array(t0, values)
                units = int(values.sum())
            else:
                units = 0
                for start, count, level in node.runs:
                    value = self._uw(level)
                    node.stream.append_run(start, value, count)
                    units += value * count
            total_units += units
            self._publish(node, t0, round(units / self.samples_per_tick))
        return total_units / (self.samples_per_tick * UW_PER_W)

    def _publish(self, node: _Node, t_ns: int, power_uw: int):
        stamp = to_global(node.clock, local_reading(node.clock, t_ns))
        rack = node.base.rack_id
        sample = PowerSample(node.node_id, NODE_CHANNEL, stamp, power_uw)
        self.bus.publish(sample_topic(self.root, rack, node.node_id, NODE_CHANNEL), encode_sample(sample))
        if not self.config.telemetry.component_channels:
            return
        for channel, watts in component_breakdown(node.spec, power_uw / UW_PER_W).items():
            reading = PowerSample(node.node_id, channel, stamp, int(round(watts * UW_PER_W)))
            self.bus.publish(sample_topic(self.root, rack, node.node_id, channel), encode_sample(reading))

    def _control(self, now_ns: int) -> bool:
        """Reactive rebalance on the bus-measured power, then one controller step per node."""
        readings = {
            node_id: self.meter.node_power_w(node_id) or 0.0 for node_id in self.nodes
        }
        models = {node_id: n.model for node_id, n in self.nodes.items()}
        directives = self.dispatcher.reactive_rebalance(self.meter.system_power_w(), now_ns, readings, models)
        for directive in directives:
            node = self.nodes[directive.node_id]
            node.controller = node.controller.with_set_point(node.model, directive.cap_w)
        if not self.dispatcher.active_caps:
            for node in self.nodes.values():
                if node.controller.set_point_w < node.model.p_max:
                    node.controller = node.controller.with_set_point(node.model, node.model.p_max)

        changed = False
        for node_id, node in self.nodes.items():
            state = node.controller
            if state.knob >= 1.0 and state.set_point_w >= node.model.p_max:
                continue
            node.controller = step_controller(state, node.model, readings[node_id], self.tick_s)
            if node.controller.knob != state.knob:
                changed = True
        if changed:
            for job in self._running():
                self._refresh_levels(job)
        return changed

    def _record_tick(self, t0: int, ticks: int, predicted_w: float, measured_w: float):
        self.timeline.append(TimelineRow(t0, ticks, predicted_w, measured_w))
        self._ticks_total += ticks
        self._peak_measured_w = max(self._peak_measured_w, measured_w)
        if measured_w > self.system_cap_w:
            self._ticks_over += ticks
            self._max_overshoot_w = max(self._max_overshoot_w, measured_w - self.system_cap_w)

    def _fast_forward(self, t0: int, ticks: int):
        """Advance a stretch with no events, no caps and every knob at 1."""
        count = ticks * self.samples_per_tick
        total_uw = 0
        for node in self.nodes.values():
            value = self._uw(node.level_w)
            node.stream.append_run(t0, value, count)
            total_uw += value
            self._publish(node, t0, value)
        elapsed_s = ticks * self.tick_s
        for job in self._running():
            job.work_done_s += elapsed_s
        self._record_tick(t0, ticks, self.dispatcher.state.predicted_load_w, total_uw / UW_PER_W)

    # -- driver -----------------------------------------------------------

    def run(self, workload: Workload) -> SimReport:
        workload.check_fits(len(self.nodes))
        arrivals: Deque[WorkloadJob] = deque(workload.jobs)
        t = 0
        tick_index = 0
        while arrivals or not self.dispatcher.is_idle:
            if self._quiet:
                rates = {job.job.job_id: 1.0 for job in self._running()}
                horizon = self._next_event_ns(t, arrivals, rates)
                # stop short of the tick that holds the next event, even one on its boundary
                ticks = (horizon - t - 1) // self.tick_ns if horizon is not None else 0
                if ticks >= 1:
                    self._fast_forward(t, ticks)
                    t += ticks * self.tick_ns
                    tick_index += ticks
                    continue
            self._tick(t, arrivals, tick_index)
            self.dispatcher.check_invariants()
            t += self.tick_ns
            tick_index += 1
        return self._report(t)

    def _report(self, run_end_ns: int) -> SimReport:
        job_users = {job_id: job.job.request.user for job_id, job in self.jobs.items()}
        ledger = close_ledger(RunRecord(
            start_ns=0,
            end_ns=run_end_ns,
            streams={node_id: n.stream for node_id, n in self.nodes.items()},
            allocations=self.allocations,
            job_users=job_users,
            period_ns=self.period_ns,
            psu_efficiency_gain=self.spec.psu_efficiency_gain,
        ))
        publish_job_energy(self.bus, ledger, self.root)

        threshold = self.config.workload.slowdown_threshold_s
        outcomes = []
        history = []
        for job_id in sorted(self.jobs):
            job = self.jobs[job_id]
            req = job.job.request
            outcome = JobOutcome(
                job_id=job_id,
                user=req.user,
                app_tag=req.app_tag,
                nodes=req.nodes_requested,
                submit_ns=req.submit_time_ns,
                predicted_w=job.predicted_w,
                tier=job.tier,
                status=STATUS_REJECTED if job.rejected else STATUS_COMPLETED,
                start_ns=job.start_ns,
                end_ns=job.end_ns,
                work_done_s=job.work_done_s,
                energy_j=ledger.per_job_j.get(job_id, 0.0),
                slowdown_threshold_s=threshold,
            )
            outcomes.append(outcome)
            if job.end_ns is None:
                continue
            duration_s = outcome.runtime_s
            node_means = tuple(
                integrate(self.nodes[n].stream, job.start_ns, job.end_ns, self.period_ns) / duration_s
                for n in job.nodes
            )
            history.append(JobRecord(req, duration_s, outcome.energy_j / duration_s, node_means))

        if self.recorder is not None:
            self.recorder.close()
        report = SimReport(
            outcomes=outcomes,
            timeline=self.timeline,
            violations=ViolationStats(self._ticks_over, self._ticks_total, self._max_overshoot_w),
            ledger=ledger,
            decisions=list(self.dispatcher.decisions),
            history=history,
            makespan_ns=self._last_event_ns,
            run_end_ns=run_end_ns,
            tick_ns=self.tick_ns,
            system_cap_w=self.system_cap_w,
            seed=self.seed,
            directives_issued=self.dispatcher.directives_issued,
            unshed_w_max=self.dispatcher.unshed_w_max,
            peak_measured_w=self._peak_measured_w,
            telemetry_lines=list(self.recorder.lines) if self.recorder else [],
        )
        log_run_stats(logger, {
            'jobs': len(outcomes),
            'completed': len(report.completed),
            'makespan_s': self._last_event_ns / NS_PER_S,
            'energy_j': round(ledger.total_j, 3),
            'violation_fraction': round(report.violations.fraction, 4),
            'directives': report.directives_issued,
        })
        return report


def run(
    spec: ClusterSpec,
    workload: Workload,
    config: RunConfig,
    seed: int,
    model: Optional[PowerModel] = None,
) -> SimReport:
    """Simulate a workload on a cluster. Identical inputs and seed give identical reports."""
    return ClusterSimulator(spec, config, seed, model).run(workload)
