"""
Energy accounting.

Decimated samples are block means, so energy is the rectangle-rule sum
of the samples in a window. Sums are kept in integer microwatt-samples
and converted to joules once, which makes job energy exactly additive.
"""

import csv
import math
import bisect
import logging
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, TextIO, Tuple, Union

from .bus import MessageBus, decode_sample, encode_energy, job_energy_topic, parse_sample_topic, TOPIC_ROOT
from .errors import AccountingError
from .telemetry import NODE_CHANNEL, NS_PER_S, PowerSample, PowerStream, UW_PER_W

logger = logging.getLogger(__name__)

DEFAULT_PERIOD_NS = 20_000
CONSERVATION_TOLERANCE = 1e-9
UW_NS_PER_J = UW_PER_W * NS_PER_S

Stream = Union[PowerStream, Sequence[PowerSample]]


def units_to_joules(units: int, period_ns: int) -> float:
    """Microwatt-samples at a given sample period, in joules."""
    return units * period_ns / UW_NS_PER_J


def snap_window(t0_ns: int, t1_ns: int, period_ns: int) -> Tuple[int, int]:
    """Widen [t0, t1) outward to sample boundaries."""
    return (t0_ns // period_ns) * period_ns, -(-t1_ns // period_ns) * period_ns


def _check_samples(samples: Sequence[PowerSample], period_ns: int):
    for prev, sample in zip(samples, samples[1:]):
        if sample.timestamp_ns <= prev.timestamp_ns:
            raise AccountingError(f"sample at {sample.timestamp_ns} ns is out of order")
        if sample.timestamp_ns != prev.timestamp_ns + period_ns:
            raise AccountingError(f"gap in stream before sample at {sample.timestamp_ns} ns")


def _stream_units(stream: PowerStream, a0: int, a1: int, period_ns: int) -> int:
    if stream.period_ns != period_ns:
        raise AccountingError(f"stream period {stream.period_ns} ns, expected {period_ns} ns")
    starts, counts, values = stream.starts, stream.counts, stream.values
    if not starts or starts[0] % period_ns:
        raise AccountingError("stream is empty or off the sample grid")
    i = max(bisect.bisect_right(starts, a0) - 1, 0)
    if starts[i] > a0:
        raise AccountingError(f"window [{a0}, {a1}) starts before the stream at {starts[i]} ns")

    units = 0
    cursor = a0
    while cursor < a1:
        if i >= len(starts):
            raise AccountingError(f"window [{a0}, {a1}) runs past the stream end at {cursor} ns")
        start = starts[i]
        if start > cursor:
            raise AccountingError(f"gap in stream before sample at {start} ns")
        hi = min(start + counts[i] * period_ns, a1)
        if hi > cursor:
            units += (hi - cursor) // period_ns * values[i]
            cursor = hi
        i += 1
    return units


def integrate_units(stream: Stream, t0_ns: int, t1_ns: int, period_ns: int = DEFAULT_PERIOD_NS) -> int:
    """
    Sum of power_uw over the samples in the snapped window.

    Raises:
        AccountingError: unordered or gapped stream, or a window the stream does not cover
    """
    if t1_ns < t0_ns:
        raise AccountingError(f"window end {t1_ns} precedes start {t0_ns}")
    if t1_ns == t0_ns:
        return 0
    a0, a1 = snap_window(t0_ns, t1_ns, period_ns)

    if isinstance(stream, PowerStream):
        return _stream_units(stream, a0, a1, period_ns)

    samples = list(stream)
    _check_samples(samples, period_ns)
    if not samples or samples[0].timestamp_ns > a0 or samples[-1].timestamp_ns + period_ns < a1:
        raise AccountingError(f"window [{a0}, {a1}) not covered by samples")
    return sum(s.power_uw for s in samples if a0 <= s.timestamp_ns < a1)


def integrate(stream: Stream, t0_ns: int, t1_ns: int, period_ns: int = DEFAULT_PERIOD_NS) -> float:
    """Energy in joules over [t0, t1), rectangle rule."""
    return units_to_joules(integrate_units(stream, t0_ns, t1_ns, period_ns), period_ns)


@dataclass(frozen=True)
class AllocationWindow:
    job_id: str
    node_id: str
    start_ns: int
    end_ns: int

    def __post_init__(self):
        if self.end_ns <= self.start_ns:
            raise AccountingError(
                f"job {self.job_id} on {self.node_id}: window end {self.end_ns} <= start {self.start_ns}"
            )


def job_energy(
    job_id: str,
    allocations: Iterable[AllocationWindow],
    node_streams: Mapping[str, Stream],
    period_ns: int = DEFAULT_PERIOD_NS,
) -> float:
    """Energy-to-solution: full node power over each of the job's windows."""
    units = 0
    for window in allocations:
        if window.job_id != job_id:
            continue
        stream = node_streams.get(window.node_id)
        if stream is None:
            raise AccountingError(f"job {job_id}: no power stream for node {window.node_id}")
        units += integrate_units(stream, window.start_ns, window.end_ns, period_ns)
    return units_to_joules(units, period_ns)


@dataclass
class RunRecord:
    """Everything close_ledger needs from a finished run."""
    start_ns: int
    end_ns: int
    streams: Dict[str, PowerStream]
    allocations: List[AllocationWindow]
    job_users: Dict[str, str]
    period_ns: int = DEFAULT_PERIOD_NS
    psu_efficiency_gain: float = 0.05


@dataclass
class EnergyLedger:
    per_job_j: Dict[str, float]
    per_user_j: Dict[str, float]
    idle_j: float
    total_j: float
    psu_efficiency_gain: float = 0.05
    start_ns: int = 0
    end_ns: int = 0
    # job_id -> (start_ns, end_ns, node count)
    job_windows: Dict[str, Tuple[int, int, int]] = field(default_factory=dict)
    job_users: Dict[str, str] = field(default_factory=dict)

    def conservation_error(self) -> float:
        """Relative mismatch between total and jobs + idle."""
        attributed = math.fsum(self.per_job_j.values()) + self.idle_j
        scale = max(abs(self.total_j), 1.0)
        return abs(attributed - self.total_j) / scale

    def facility_energy_j(self) -> float:
        """Facility-side energy after the PSU saving. Reporting only."""
        return self.total_j * (1.0 - self.psu_efficiency_gain)


def _complement(windows: List[Tuple[int, int]], start: int, end: int) -> List[Tuple[int, int]]:
    gaps = []
    cursor = start
    for lo, hi in windows:
        if lo > cursor:
            gaps.append((cursor, lo))
        cursor = max(cursor, hi)
    if cursor < end:
        gaps.append((cursor, end))
    return gaps


def close_ledger(run: RunRecord) -> EnergyLedger:
    """
    Attribute every sample of the run to one job or to idle.

    Raises:
        AccountingError: overlapping allocations on a node, allocations
            outside the run or on nodes without a stream, or a conservation mismatch
    """
    period = run.period_ns
    run_start, run_end = snap_window(run.start_ns, run.end_ns, period) if run.end_ns > run.start_ns \
        else (run.start_ns, run.start_ns)

    by_node: Dict[str, List[AllocationWindow]] = defaultdict(list)
    for window in run.allocations:
        if window.node_id not in run.streams:
            raise AccountingError(f"job {window.job_id}: no power stream for node {window.node_id}")
        by_node[window.node_id].append(window)

    job_units: Dict[str, int] = {job_id: 0 for job_id in run.job_users}
    windows: Dict[str, Tuple[int, int, int]] = {}
    idle_units = 0
    total_units = 0
    for node_id, stream in sorted(run.streams.items()):
        snapped = []
        for window in sorted(by_node.get(node_id, []), key=lambda w: (w.start_ns, w.job_id)):
            lo, hi = snap_window(window.start_ns, window.end_ns, period)
            if lo < run_start or hi > run_end:
                raise AccountingError(
                    f"job {window.job_id} on {node_id}: window [{lo}, {hi}) outside the run"
                )
            if snapped and lo < snapped[-1][1]:
                raise AccountingError(
                    f"node {node_id}: job {window.job_id} overlaps job {snapped[-1][2]} at {lo} ns"
                )
            snapped.append((lo, hi, window.job_id))
            first, last, n = windows.get(window.job_id, (lo, hi, 0))
            windows[window.job_id] = (min(first, lo), max(last, hi), n + 1)
            job_units[window.job_id] = job_units.get(window.job_id, 0) + \
                integrate_units(stream, lo, hi, period)

        for lo, hi in _complement([(lo, hi) for lo, hi, _ in snapped], run_start, run_end):
            idle_units += integrate_units(stream, lo, hi, period)
        node_total = integrate_units(stream, run_start, run_end, period)
        total_units += node_total

    attributed = sum(job_units.values()) + idle_units
    if attributed != total_units:
        raise AccountingError(
            f"attribution mismatch: jobs + idle = {attributed} uW-samples, stream total = {total_units}"
        )

    per_job_j = {job_id: units_to_joules(u, period) for job_id, u in job_units.items()}
    by_user: Dict[str, List[float]] = defaultdict(list)
    for job_id, joules in per_job_j.items():
        by_user[run.job_users.get(job_id, '')].append(joules)

    ledger = EnergyLedger(
        per_job_j=per_job_j,
        per_user_j={user: math.fsum(values) for user, values in by_user.items()},
        idle_j=units_to_joules(idle_units, period),
        total_j=units_to_joules(total_units, period),
        psu_efficiency_gain=run.psu_efficiency_gain,
        start_ns=run_start,
        end_ns=run_end,
        job_windows=windows,
        job_users=dict(run.job_users),
    )
    if ledger.conservation_error() > CONSERVATION_TOLERANCE:
        raise AccountingError(f"ledger does not conserve energy ({ledger.conservation_error():.3e})")
    logger.debug(f"Closed ledger: {len(per_job_j)} jobs, total {ledger.total_j:.3f} J")
    return ledger


LEDGER_COLUMNS = ['job_id', 'user', 'nodes', 'start_s', 'end_s', 'energy_j', 'avg_power_w']


def fmt_seconds(ns: int) -> str:
    return f"{ns / NS_PER_S:.6f}"


def fmt_joules(joules: float) -> str:
    return f"{joules:.6f}"


def fmt_watts(watts: float) -> str:
    return f"{watts:.3f}"


def _avg_power(joules: float, start_ns: int, end_ns: int) -> str:
    if end_ns <= start_ns:
        return fmt_watts(0.0)
    return fmt_watts(joules * NS_PER_S / (end_ns - start_ns))


def write_ledger_csv(ledger: EnergyLedger, out: TextIO):
    """One row per job ordered by job_id, then #IDLE and a final #TOTAL row."""
    writer = csv.writer(out, lineterminator='\n')
    writer.writerow(LEDGER_COLUMNS)
    for job_id in sorted(ledger.per_job_j):
        joules = ledger.per_job_j[job_id]
        start, end, nodes = ledger.job_windows.get(job_id, (0, 0, 0))
        writer.writerow([
            job_id, ledger.job_users.get(job_id, ''), nodes,
            fmt_seconds(start), fmt_seconds(end), fmt_joules(joules),
            _avg_power(joules, start, end),
        ])
    writer.writerow(['#IDLE', '', '', fmt_seconds(ledger.start_ns), fmt_seconds(ledger.end_ns),
                     fmt_joules(ledger.idle_j), ''])
    writer.writerow(['#TOTAL', '', '', fmt_seconds(ledger.start_ns), fmt_seconds(ledger.end_ns),
                     fmt_joules(ledger.total_j), _avg_power(ledger.total_j, ledger.start_ns, ledger.end_ns)])


def publish_job_energy(bus: MessageBus, ledger: EnergyLedger, root: str = TOPIC_ROOT) -> int:
    """Announce every job's energy-to-solution; returns total deliveries."""
    delivered = 0
    for job_id in sorted(ledger.per_job_j):
        end_ns = ledger.job_windows.get(job_id, (0, ledger.end_ns, 0))[1]
        delivered += bus.publish(job_energy_topic(root, job_id), encode_energy(end_ns, ledger.per_job_j[job_id]))
    return delivered


class SystemPowerMeter:
    """
    Bus-side aggregator of node-channel samples.

    Keeps the latest reading of every node and reports their sum as the
    measured system power.
    """

    def __init__(self, bus: MessageBus, root: str = TOPIC_ROOT):
        self.latest_uw: Dict[str, int] = {}
        self.received = 0
        self.subscription = bus.subscribe(f"{root}/+/+/{NODE_CHANNEL}/power", self._on_sample)

    def _on_sample(self, envelope):
        _, node_id, _ = parse_sample_topic(envelope.topic)
        sample = decode_sample(envelope.payload, node_id, NODE_CHANNEL)
        self.latest_uw[node_id] = sample.power_uw
        self.received += 1

    def node_power_w(self, node_id: str) -> Optional[float]:
        value = self.latest_uw.get(node_id)
        return None if value is None else value / UW_PER_W

    def system_power_w(self) -> float:
        return sum(self.latest_uw.values()) / UW_PER_W
