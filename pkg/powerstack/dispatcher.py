"""
Power-aware job dispatching.

Proactive side: EASY backfilling with power as a second consumable.
The queue head starts when enough nodes are free and the predicted load
stays under the system cap; otherwise it gets a reservation and later
jobs may only jump ahead if they cannot delay it.

Reactive side: when measured power exceeds the cap, busy nodes receive
power caps that shed the excess in proportion to their dynamic power.
"""

import csv
import math
import logging
from collections import deque
from dataclasses import dataclass, field
from typing import Deque, Dict, Iterable, List, Mapping, Optional, Set, TextIO, Tuple

from .errors import SchedulerError
from .powercap import NodePowerModel
from .predictor import JobRequest
from .telemetry import NS_PER_S

logger = logging.getLogger(__name__)

EV_SUBMIT = 'submit'
EV_START = 'start'
EV_BACKFILL = 'backfill'
EV_END = 'end'
EV_REJECT = 'reject'
EV_RESERVE = 'reserve'
EV_CAP = 'cap'
EV_UNCAP = 'uncap'

DECISION_COLUMNS = ['time_s', 'event', 'job_id', 'nodes', 'predicted_w', 'reserved_start_s']


@dataclass
class RunningJob:
    job_id: str
    nodes: Tuple[str, ...]
    predicted_w: float
    start_ns: int
    walltime_ns: int

    @property
    def expected_end_ns(self) -> int:
        return self.start_ns + self.walltime_ns


@dataclass(frozen=True)
class Reservation:
    job_id: str
    reserved_start_ns: int
    reserved_nodes: Tuple[str, ...]


@dataclass(frozen=True)
class CapDirective:
    node_id: str
    cap_w: float
    issued_ns: int


@dataclass(frozen=True)
class Decision:
    """One row of the decision log. For cap rows job_id holds the node id."""
    time_ns: int
    event: str
    job_id: str
    nodes: int
    predicted_w: Optional[float] = None
    reserved_start_ns: Optional[int] = None


@dataclass
class SchedulerState:
    system_cap_w: float
    free_nodes: Set[str]
    queue: Deque[JobRequest] = field(default_factory=deque)
    running: Dict[str, RunningJob] = field(default_factory=dict)
    reservation: Optional[Reservation] = None
    # Idle floor of every node; unallocated nodes still draw it
    node_idle_w: Dict[str, float] = field(default_factory=dict)
    predictions: Dict[str, float] = field(default_factory=dict)

    @property
    def predicted_load_w(self) -> float:
        return math.fsum(job.predicted_w for job in self.running.values())

    def idle_floor_w(self, nodes: Iterable[str]) -> float:
        return math.fsum(self.node_idle_w.get(node, 0.0) for node in nodes)


def pick_nodes(free: Iterable[str], count: int) -> Tuple[str, ...]:
    """Lowest node ids first."""
    return tuple(sorted(free)[:count])


def _fits(free: Set[str], load_w: float, req: JobRequest, predicted_w: float,
          system_cap_w: float, state: SchedulerState) -> Optional[Tuple[str, ...]]:
    if len(free) < req.nodes_requested:
        return None
    chosen = pick_nodes(free, req.nodes_requested)
    rest = free.difference(chosen)
    if load_w + predicted_w + state.idle_floor_w(rest) <= system_cap_w:
        return chosen
    return None


def admit_check(state: SchedulerState, req: JobRequest, predicted_w: float) -> bool:
    """
    Enough free nodes, and predicted load plus this job plus the idle floor
    of nodes left unallocated stays within the cap (inclusive).
    """
    return _fits(state.free_nodes, state.predicted_load_w, req, predicted_w, state.system_cap_w, state) is not None


@dataclass
class _Scan:
    reservation: Reservation
    free_at: Set[str]
    load_at: float


class Dispatcher:
    """Owns the scheduler state, the decision log and the reactive bookkeeping."""

    def __init__(
        self,
        node_ids: Iterable[str],
        system_cap_w: float,
        node_idle_w: Optional[Mapping[str, float]] = None,
        backfill: bool = True,
        reactive: bool = True,
    ):
        if system_cap_w <= 0:
            raise SchedulerError(f"system cap must be positive, got {system_cap_w}")
        self.node_ids = tuple(sorted(node_ids))
        self.state = SchedulerState(
            system_cap_w=system_cap_w,
            free_nodes=set(self.node_ids),
            node_idle_w=dict(node_idle_w or {}),
        )
        self.backfill = backfill
        self.reactive = reactive
        self.decisions: List[Decision] = []
        self.active_caps: Dict[str, float] = {}
        self.directives_issued = 0
        self.unshed_w_max = 0.0
        self.unshed_events = 0
        self.rejected: Dict[str, str] = {}
        self._scan: Optional[_Scan] = None

    # -- submission -------------------------------------------------------

    def feasible_on_empty_machine(self, req: JobRequest, predicted_w: float) -> bool:
        empty = SchedulerState(self.state.system_cap_w, set(self.node_ids), node_idle_w=self.state.node_idle_w)
        return admit_check(empty, req, predicted_w)

    def submit(self, req: JobRequest, predicted_w: float, now_ns: int) -> bool:
        """Queue a job; jobs that could never be admitted are rejected instead."""
        if predicted_w < 0:
            raise SchedulerError(f"job {req.job_id}: negative prediction {predicted_w}")
        if req.job_id in self.state.predictions or req.job_id in self.rejected:
            raise SchedulerError(f"job {req.job_id} submitted twice")
        if not self.feasible_on_empty_machine(req, predicted_w):
            reason = (
                f"needs {req.nodes_requested} nodes" if req.nodes_requested > len(self.node_ids)
                else f"predicted {predicted_w:.1f} W cannot fit under the {self.state.system_cap_w:.1f} W cap"
            )
            self.rejected[req.job_id] = reason
            self._log(now_ns, EV_REJECT, req.job_id, req.nodes_requested, predicted_w)
            logger.warning(f"Rejected job {req.job_id}: {reason}")
            return False
        self.state.queue.append(req)
        self.state.predictions[req.job_id] = predicted_w
        self._log(now_ns, EV_SUBMIT, req.job_id, req.nodes_requested, predicted_w)
        return True

    # -- proactive scheduling ----------------------------------------------

    def compute_reservation(self, now_ns: int) -> Optional[Reservation]:
        """
        Earliest release point, by requested walltimes, at which the queue
        head fits on both nodes and power. None when the queue is empty.
        """
        scan = self._reservation_scan(now_ns)
        return scan.reservation if scan else None

    def _reservation_scan(self, now_ns: int) -> Optional[_Scan]:
        state = self.state
        if not state.queue:
            return None
        head = state.queue[0]
        predicted = state.predictions[head.job_id]
        free = set(state.free_nodes)
        remaining = dict(state.running)

        chosen = _fits(free, state.predicted_load_w, head, predicted, state.system_cap_w, state)
        if chosen is not None:
            return _Scan(Reservation(head.job_id, now_ns, chosen), free, state.predicted_load_w)

        releases = sorted(remaining.values(), key=lambda j: (max(j.expected_end_ns, now_ns), j.job_id))
        i = 0
        while i < len(releases):
            at = max(releases[i].expected_end_ns, now_ns)
            while i < len(releases) and max(releases[i].expected_end_ns, now_ns) == at:
                job = releases[i]
                free.update(job.nodes)
                del remaining[job.job_id]
                i += 1
            load = math.fsum(j.predicted_w for j in remaining.values())
            chosen = _fits(free, load, head, predicted, state.system_cap_w, state)
            if chosen is not None:
                return _Scan(Reservation(head.job_id, at, chosen), free, load)
        raise SchedulerError(f"queue head {head.job_id} cannot start even on an empty machine")

    def _start(self, req: JobRequest, nodes: Tuple[str, ...], now_ns: int, event: str) -> RunningJob:
        state = self.state
        state.queue.remove(req)
        state.free_nodes.difference_update(nodes)
        job = RunningJob(
            job_id=req.job_id,
            nodes=nodes,
            predicted_w=state.predictions[req.job_id],
            start_ns=now_ns,
            walltime_ns=req.walltime_req_s * NS_PER_S,
        )
        state.running[req.job_id] = job
        self._log(now_ns, event, req.job_id, len(nodes), job.predicted_w)
        return job

    def _fits_beside(self, req: JobRequest, nodes: Tuple[str, ...], predicted_w: float, scan: _Scan) -> bool:
        """Still running at the reserved start, yet leaving the head's nodes and power intact."""
        reservation = scan.reservation
        if set(nodes) & set(reservation.reserved_nodes):
            return False
        free_after = scan.free_at.difference(nodes)
        head = self.state.queue[0]
        head_w = self.state.predictions[head.job_id]
        rest = free_after.difference(reservation.reserved_nodes)
        return scan.load_at + predicted_w + head_w + self.state.idle_floor_w(rest) <= self.state.system_cap_w

    def schedule_tick(self, now_ns: int) -> List[RunningJob]:
        """
        Start what can start now.

        1. Start queue heads in order while they pass admit_check.
        2. Reserve the blocked head at its earliest feasible release point.
        3. Backfill later jobs, earliest submission first, that pass
           admit_check and either end by the reserved start or leave the
           reservation's nodes and power headroom intact.
        """
        state = self.state
        started: List[RunningJob] = []

        while state.queue:
            head = state.queue[0]
            predicted = state.predictions[head.job_id]
            chosen = _fits(state.free_nodes, state.predicted_load_w, head, predicted, state.system_cap_w, state)
            if chosen is None:
                break
            started.append(self._start(head, chosen, now_ns, EV_START))

        scan = self._reservation_scan(now_ns)
        self._set_reservation(scan.reservation if scan else None, now_ns)
        if scan is None or not self.backfill:
            self._scan = scan
            return started

        # always the earliest startable candidate, rechecked after every start
        while True:
            pick = self._first_backfill(now_ns, scan)
            if pick is None:
                break
            req, chosen = pick
            before = scan.reservation.reserved_start_ns
            started.append(self._start(req, chosen, now_ns, EV_BACKFILL))
            scan = self._reservation_scan(now_ns)
            if scan.reservation.reserved_start_ns > before:
                raise SchedulerError(
                    f"backfilling {req.job_id} delayed the reservation of {scan.reservation.job_id} "
                    f"from {before} to {scan.reservation.reserved_start_ns}"
                )
            self._set_reservation(scan.reservation, now_ns)

        self._scan = scan
        return started

    def _first_backfill(self, now_ns: int, scan: _Scan) -> Optional[Tuple[JobRequest, Tuple[str, ...]]]:
        """Earliest-submitted queued job behind the head that may start now."""
        state = self.state
        for req in sorted(list(state.queue)[1:], key=lambda r: (r.submit_time_ns, r.job_id)):
            predicted = state.predictions[req.job_id]
            chosen = _fits(state.free_nodes, state.predicted_load_w, req, predicted, state.system_cap_w, state)
            if chosen is None:
                continue
            ends_in_time = now_ns + req.walltime_req_s * NS_PER_S <= scan.reservation.reserved_start_ns
            if ends_in_time or self._fits_beside(req, chosen, predicted, scan):
                return req, chosen
        return None

    def _set_reservation(self, reservation: Optional[Reservation], now_ns: int):
        previous = self.state.reservation
        self.state.reservation = reservation
        if reservation is None:
            return
        changed = (
            previous is None
            or previous.job_id != reservation.job_id
            or previous.reserved_start_ns != reservation.reserved_start_ns
        )
        if changed and reservation.reserved_start_ns > now_ns:
            self._log(
                now_ns, EV_RESERVE, reservation.job_id, len(reservation.reserved_nodes),
                self.state.predictions[reservation.job_id], reservation.reserved_start_ns,
            )

    def on_job_end(self, job_id: str, now_ns: int) -> RunningJob:
        """
        Free a finished job's nodes and power.

        Raises:
            SchedulerError: unknown or already finished job
        """
        state = self.state
        job = state.running.pop(job_id, None)
        if job is None:
            raise SchedulerError(f"job {job_id} is not running")
        state.free_nodes.update(job.nodes)
        self._log(now_ns, EV_END, job_id, len(job.nodes), job.predicted_w)
        scan = self._reservation_scan(now_ns)
        self.state.reservation = scan.reservation if scan else None
        return job

    def check_invariants(self):
        """Raise SchedulerError if the proactive guarantee or node exclusivity is broken."""
        state = self.state
        if state.predicted_load_w > state.system_cap_w:
            raise SchedulerError(
                f"predicted load {state.predicted_load_w:.3f} W exceeds cap {state.system_cap_w:.3f} W"
            )
        seen: Set[str] = set()
        for job in state.running.values():
            overlap = seen.intersection(job.nodes)
            if overlap:
                raise SchedulerError(f"node {sorted(overlap)[0]} allocated twice")
            seen.update(job.nodes)
        if seen & state.free_nodes:
            raise SchedulerError("a running job's node is also free")

    @property
    def is_idle(self) -> bool:
        return not self.state.queue and not self.state.running

    # -- reactive capping -------------------------------------------------

    def reactive_rebalance(
        self,
        measured_system_w: float,
        now_ns: int,
        node_power_w: Mapping[str, float],
        node_models: Mapping[str, NodePowerModel],
    ) -> List[CapDirective]:
        """
        Shed the excess over the cap from busy nodes, proportionally to
        their dynamic power and never below p_idle. Under the cap, every
        active directive is lifted and nothing is returned.
        """
        if not self.reactive:
            return []
        if measured_system_w < 0:
            raise SchedulerError(f"negative measured power {measured_system_w}")
        cap = self.state.system_cap_w
        if measured_system_w <= cap:
            if self.active_caps:
                self._log(now_ns, EV_UNCAP, '', len(self.active_caps))
                self.active_caps.clear()
            return []

        deficit = measured_system_w - cap
        busy = sorted(node for job in self.state.running.values() for node in job.nodes)
        dynamic = {
            node: max(0.0, node_power_w.get(node, 0.0) - node_models[node].p_idle) for node in busy
        }
        total_dynamic = math.fsum(dynamic.values())

        directives = []
        for node in busy:
            model = node_models[node]
            current = node_power_w.get(node, model.p_idle)
            share = dynamic[node] / total_dynamic if total_dynamic > 0 else 0.0
            cap_w = min(model.p_max, max(model.p_idle, current - deficit * share))
            directives.append(CapDirective(node, cap_w, now_ns))
            self.active_caps[node] = cap_w
            self._log(now_ns, EV_CAP, node, 1, cap_w)

        unshed = deficit - total_dynamic
        if unshed > 0:
            self.unshed_events += 1
            self.unshed_w_max = max(self.unshed_w_max, unshed)
            logger.warning(f"{unshed:.1f} W over the cap cannot be shed at t={now_ns / NS_PER_S:.0f}s")
        self.directives_issued += len(directives)
        return directives

    # -- decision log -----------------------------------------------------

    def _log(self, now_ns: int, event: str, job_id: str, nodes: int,
             predicted_w: Optional[float] = None, reserved_start_ns: Optional[int] = None):
        self.decisions.append(Decision(now_ns, event, job_id, nodes, predicted_w, reserved_start_ns))


def write_decisions_csv(decisions: Iterable[Decision], out: TextIO):
    writer = csv.writer(out, lineterminator='\n')
    writer.writerow(DECISION_COLUMNS)
    for d in decisions:
        writer.writerow([
            f"{d.time_ns / NS_PER_S:.6f}",
            d.event,
            d.job_id,
            d.nodes,
            '' if d.predicted_w is None else f"{d.predicted_w:.3f}",
            '' if d.reserved_start_ns is None else f"{d.reserved_start_ns / NS_PER_S:.6f}",
        ])
