"""
Energy-gateway model.

Raw power sampling through an integrating ADC, block-average decimation,
and the drifting node clocks that stamp the decimated samples.

The simulator never materialises raw samples: block means of a
piecewise-constant trace are computed in closed form. The full-rate path
(`raw_samples` + `decimate`) exists for checking that shortcut.
"""

import math
import logging
from dataclasses import dataclass, field, replace
from typing import Dict, Iterator, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np

from .cluster_model import PowerState
from .errors import TelemetryError

logger = logging.getLogger(__name__)

NS_PER_S = 1_000_000_000
UW_PER_W = 1_000_000
MAX_RAW_RATE_HZ = 1_600_000
NODE_CHANNEL = 'node'


@dataclass(frozen=True)
class PowerSample:
    """One decimated reading for one (node, channel)."""
    node_id: str
    channel: str
    timestamp_ns: int
    power_uw: int

    def __post_init__(self):
        if self.power_uw < 0:
            raise TelemetryError(f"negative power {self.power_uw} uW at {self.timestamp_ns}")

    @property
    def power_w(self) -> float:
        return self.power_uw / UW_PER_W


@dataclass(frozen=True)
class AdcSpec:
    bits: int = 12
    full_scale_w: float = 4095.0
    raw_rate_hz: int = 800_000
    decimation_factor: int = 16
    noise_amplitude_w: float = 0.0

    def __post_init__(self):
        if self.bits < 1:
            raise TelemetryError("ADC needs at least 1 bit")
        if self.full_scale_w <= 0:
            raise TelemetryError("full_scale_w must be positive")
        if not 0 < self.raw_rate_hz <= MAX_RAW_RATE_HZ:
            raise TelemetryError(f"raw_rate_hz must be in (0, {MAX_RAW_RATE_HZ}]")
        if self.decimation_factor < 1 or self.raw_rate_hz % self.decimation_factor:
            raise TelemetryError("raw_rate_hz must be a multiple of decimation_factor")
        if NS_PER_S % self.raw_rate_hz or NS_PER_S % self.sample_rate_hz:
            raise TelemetryError("sample periods must be whole nanoseconds")
        if self.noise_amplitude_w < 0:
            raise TelemetryError("noise_amplitude_w must be >= 0")

    @property
    def max_code(self) -> int:
        return 2 ** self.bits - 1

    @property
    def lsb(self) -> float:
        return self.full_scale_w / self.max_code

    @property
    def sample_rate_hz(self) -> int:
        return self.raw_rate_hz // self.decimation_factor

    @property
    def period_ns(self) -> int:
        """Spacing of decimated samples (20 us at the defaults)."""
        return NS_PER_S // self.sample_rate_hz

    @property
    def raw_period_ns(self) -> int:
        return NS_PER_S // self.raw_rate_hz


class Quantized(NamedTuple):
    watts: float
    saturated: bool


def quantize(true_power: float, adc: AdcSpec) -> Quantized:
    """Round to the nearest ADC code; out-of-range input clamps and is flagged."""
    if true_power >= adc.full_scale_w:
        return Quantized(adc.full_scale_w, true_power > adc.full_scale_w)
    if true_power <= 0:
        return Quantized(0.0, true_power < 0)
    code = int(np.rint(true_power / adc.lsb))
    if code >= adc.max_code:
        return Quantized(adc.full_scale_w, False)
    return Quantized(code * adc.lsb, False)


def quantize_array(values, adc: AdcSpec) -> Tuple[np.ndarray, int]:
    """Vectorised quantize; returns (watts, number of saturated inputs)."""
    values = np.asarray(values, dtype=float)
    saturated = int(np.count_nonzero((values < 0) | (values > adc.full_scale_w)))
    codes = np.rint(np.clip(values, 0.0, adc.full_scale_w) / adc.lsb)
    watts = codes * adc.lsb
    watts[codes >= adc.max_code] = adc.full_scale_w
    return watts, saturated


def decimate(raw, factor: int) -> np.ndarray:
    """Boxcar mean over consecutive blocks of `factor` raw samples."""
    raw = np.asarray(raw, dtype=float)
    if factor < 1:
        raise TelemetryError(f"decimation factor must be >= 1, got {factor}")
    if raw.size % factor:
        raise TelemetryError(
            f"{raw.size} raw samples is not a multiple of the decimation factor {factor}"
        )
    if factor == 1:
        return raw.copy()
    return raw.reshape(-1, factor).mean(axis=1)


@dataclass(frozen=True)
class PowerTrace:
    """
    Piecewise-constant true power.

    levels_w[i] holds on [times_ns[i], times_ns[i+1]); the last level holds
    forever and the trace is 0 W before times_ns[0].
    """
    times_ns: Tuple[int, ...]
    levels_w: Tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, 'times_ns', tuple(int(t) for t in self.times_ns))
        object.__setattr__(self, 'levels_w', tuple(float(w) for w in self.levels_w))
        if len(self.times_ns) != len(self.levels_w) or not self.times_ns:
            raise TelemetryError("trace needs one level per breakpoint")
        if any(b <= a for a, b in zip(self.times_ns, self.times_ns[1:])):
            raise TelemetryError("trace breakpoints must strictly increase")

    @classmethod
    def constant(cls, watts: float, start_ns: int = 0) -> 'PowerTrace':
        return cls((start_ns,), (watts,))

    def level_at(self, t_ns: int) -> float:
        index = int(np.searchsorted(self.times_ns, t_ns, side='right')) - 1
        return 0.0 if index < 0 else self.levels_w[index]

    def block_means(self, t0_ns: int, n_blocks: int, block_ns: int) -> np.ndarray:
        """Exact mean of the trace over each of n consecutive blocks starting at t0."""
        if n_blocks <= 0:
            return np.zeros(0)
        t1_ns = t0_ns + n_blocks * block_ns
        # Segments clipped to the window, times relative to t0
        times = np.asarray(self.times_ns, dtype=np.int64)
        levels = np.asarray(self.levels_w, dtype=float)
        first = max(int(np.searchsorted(times, t0_ns, side='right')) - 1, 0)
        last = int(np.searchsorted(times, t1_ns, side='left'))
        starts = np.maximum(times[first:last] - t0_ns, 0)
        seg_levels = levels[first:last].copy()
        if self.times_ns[0] > t0_ns:
            starts = np.concatenate(([0], starts))
            seg_levels = np.concatenate(([0.0], seg_levels))
        ends = np.append(starts[1:], n_blocks * block_ns)
        cumulative = np.concatenate(([0.0], np.cumsum(seg_levels * (ends - starts))))

        edges = np.arange(n_blocks + 1, dtype=np.int64) * block_ns
        index = np.searchsorted(starts, edges, side='right') - 1
        energy = cumulative[index] + seg_levels[index] * (edges - starts[index])
        return np.diff(energy) / block_ns


@dataclass(frozen=True)
class NodeClock:
    """
    Gateway clock.

    offset_ns, drift_ppm, last_sync_ns and residual_bound_ns are what the
    gateway knows. true_offset_ns (the real offset at sync_global_ns) is the
    hidden physical state used to produce local readings.
    """
    offset_ns: int = 0
    drift_ppm: float = 0.0
    last_sync_ns: int = 0  # local time of the last sync
    residual_bound_ns: int = 0
    true_offset_ns: int = 0
    sync_global_ns: int = 0

    def __post_init__(self):
        if self.residual_bound_ns < 0:
            raise TelemetryError("residual_bound_ns must be >= 0")
        if abs(self.drift_ppm) >= 1e5:
            raise TelemetryError("drift_ppm must be below 1e5 in magnitude")

    @property
    def drift(self) -> float:
        return self.drift_ppm * 1e-6


def true_offset(clock: NodeClock, global_ns: int) -> int:
    return clock.true_offset_ns + round(clock.drift * (global_ns - clock.sync_global_ns))


def local_reading(clock: NodeClock, global_ns: int) -> int:
    """What the gateway clock reads at a true global instant."""
    return global_ns + true_offset(clock, global_ns)


def sync(
    clock: NodeClock,
    true_global_ns: int,
    protocol_error_ns: int,
    rng: Optional[np.random.Generator] = None,
) -> NodeClock:
    """
    Re-estimate the offset at a sync event.

    The estimate error is drawn uniformly from [-protocol_error_ns, protocol_error_ns]
    when an rng is given, and is 0 otherwise.
    """
    if protocol_error_ns < 0:
        raise TelemetryError(f"protocol_error_ns must be >= 0, got {protocol_error_ns}")
    offset_now = true_offset(clock, true_global_ns)
    error = 0
    if rng is not None and protocol_error_ns > 0:
        error = int(rng.integers(-protocol_error_ns, protocol_error_ns + 1))
    return replace(
        clock,
        offset_ns=offset_now + error,
        last_sync_ns=true_global_ns + offset_now,
        residual_bound_ns=protocol_error_ns,
        true_offset_ns=offset_now,
        sync_global_ns=true_global_ns,
    )


def to_global(clock: NodeClock, local_ns: int) -> int:
    """
    Map a local reading onto the global timebase.

    Strictly increasing for readings at least 2 ns apart; adjacent
    nanoseconds may collapse when the clock runs fast.
    """
    if local_ns < clock.last_sync_ns:
        raise TelemetryError(
            f"local time {local_ns} precedes last sync {clock.last_sync_ns}"
        )
    elapsed = local_ns - clock.last_sync_ns
    return local_ns - clock.offset_ns - round(elapsed * clock.drift / (1.0 + clock.drift))


def _stamp(clock: NodeClock, global_ns: np.ndarray) -> np.ndarray:
    """Vectorised to_global(local_reading(g)) for grid instants."""
    d = clock.drift
    local = global_ns + clock.true_offset_ns + np.rint(d * (global_ns - clock.sync_global_ns)).astype(np.int64)
    if local.size and local[0] < clock.last_sync_ns:
        raise TelemetryError(
            f"local time {int(local[0])} precedes last sync {clock.last_sync_ns}"
        )
    elapsed = local - clock.last_sync_ns
    return local - clock.offset_ns - np.rint(elapsed * d / (1.0 + d)).astype(np.int64)


def raw_samples(trace: PowerTrace, t0_ns: int, n_raw: int, adc: AdcSpec) -> np.ndarray:
    """Full-rate raw stream; each sample is the trace mean over its raw period."""
    return trace.block_means(t0_ns, n_raw, adc.raw_period_ns)


def sample_window(
    trace: PowerTrace,
    t0_ns: int,
    t1_ns: int,
    adc: AdcSpec,
    clock: Optional[NodeClock] = None,
    noise_seed: int = 0,
    node_id: str = '',
    channel: str = NODE_CHANNEL,
    full_rate: bool = False,
) -> List[PowerSample]:
    """Decimated, quantised and timestamped samples of [t0, t1)."""
    if t1_ns == t0_ns:
        return []
    if t1_ns < t0_ns:
        raise TelemetryError(f"window end {t1_ns} precedes start {t0_ns}")
    period = adc.period_ns
    if t0_ns % period or t1_ns % period:
        raise TelemetryError(f"window [{t0_ns}, {t1_ns}) not aligned to the {period} ns sample grid")

    n = (t1_ns - t0_ns) // period
    if full_rate:
        raw = raw_samples(trace, t0_ns, n * adc.decimation_factor, adc)
        means = decimate(raw, adc.decimation_factor)
    else:
        means = trace.block_means(t0_ns, n, period)

    if adc.noise_amplitude_w > 0:
        rng = np.random.default_rng(noise_seed)
        means = means + rng.uniform(-adc.noise_amplitude_w, adc.noise_amplitude_w, n)

    watts, saturated = quantize_array(means, adc)
    if saturated:
        logger.warning(f"{node_id}/{channel}: {saturated} samples saturated the ADC")

    grid = t0_ns + np.arange(n, dtype=np.int64) * period
    stamps = _stamp(clock or NodeClock(), grid)
    power_uw = np.rint(watts * UW_PER_W).astype(np.int64)
    return [
        PowerSample(node_id, channel, int(ts), int(uw))
        for ts, uw in zip(stamps, power_uw)
    ]


@dataclass
class PowerStream:
    """
    Uniformly spaced decimated stream stored as runs of equal values.

    Run i covers starts[i] + k * period_ns for k < counts[i], every sample
    carrying values[i] microwatts. Runs are kept in time order; gaps between
    runs are allowed so that accounting can detect them.
    """
    period_ns: int
    starts: List[int] = field(default_factory=list)
    counts: List[int] = field(default_factory=list)
    values: List[int] = field(default_factory=list)

    @property
    def start_ns(self) -> Optional[int]:
        return self.starts[0] if self.starts else None

    @property
    def end_ns(self) -> Optional[int]:
        """Time just past the last sample."""
        if not self.starts:
            return None
        return self.starts[-1] + self.counts[-1] * self.period_ns

    def __len__(self) -> int:
        return sum(self.counts)

    def append_run(self, t_ns: int, value_uw: int, count: int = 1):
        if count <= 0:
            return
        if value_uw < 0:
            raise TelemetryError(f"negative power {value_uw} uW at {t_ns}")
        end = self.end_ns
        if end is not None and t_ns < end:
            raise TelemetryError(f"sample at {t_ns} precedes stream end {end}")
        if end == t_ns and self.values[-1] == value_uw:
            self.counts[-1] += count
            return
        self.starts.append(int(t_ns))
        self.counts.append(int(count))
        self.values.append(int(value_uw))

    def append_array(self, t_ns: int, values_uw: Union[Sequence[int], np.ndarray]):
        """Append consecutive samples starting at t_ns, compressing equal neighbours."""
        values_uw = np.asarray(values_uw, dtype=np.int64)
        if values_uw.size == 0:
            return
        change = np.flatnonzero(np.diff(values_uw)) + 1
        bounds = np.concatenate(([0], change, [values_uw.size]))
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            self.append_run(t_ns + int(lo) * self.period_ns, int(values_uw[lo]), int(hi - lo))

    def runs(self) -> Iterator[Tuple[int, int, int]]:
        return zip(self.starts, self.counts, self.values)

    def samples(self, node_id: str = '', channel: str = NODE_CHANNEL) -> List[PowerSample]:
        out = []
        for start, count, value in self.runs():
            out.extend(
                PowerSample(node_id, channel, start + k * self.period_ns, value) for k in range(count)
            )
        return out

    def first_gap(self) -> Optional[int]:
        """Timestamp of the first run that does not continue its predecessor."""
        for i in range(1, len(self.starts)):
            if self.starts[i] != self.starts[i - 1] + self.counts[i - 1] * self.period_ns:
                return self.starts[i]
        return None


def component_breakdown(node, node_power_w: float) -> Dict[str, float]:
    """
    Split a node reading across its component channels.

    Each component gets its gated idle contribution plus a share of the
    dynamic power proportional to its own dynamic range. The chassis
    residual is not attributed to any component channel.
    """
    names = node.channel_names()
    dynamic = max(0.0, node_power_w - node.idle_power)
    weights = [
        (c.max_power - c.idle_power) if c.state is PowerState.ON else 0.0
        for c in node.components
    ]
    total_weight = math.fsum(weights)
    breakdown = {}
    for name, component, weight in zip(names, node.components, weights):
        share = dynamic * weight / total_weight if total_weight > 0 else 0.0
        breakdown[name] = component.contribution + share
    return breakdown
