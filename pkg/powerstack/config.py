"""
Run configuration for powerstack.

A run is described by a single INI file. The cluster sections are turned into
a ClusterSpec by cluster_model.load_cluster_spec; the remaining sections map
onto the frozen settings dataclasses below.
"""

import re
import configparser
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, FrozenSet, List, Optional

from .errors import ConfigError

logger = logging.getLogger(__name__)

# Section name -> allowed keys. None means "any key" (checked by the owner).
SECTION_KEYS: Dict[str, Optional[FrozenSet[str]]] = {
    'system': frozenset({'system_cap_w', 'rack_cap_w', 'psu_efficiency_gain'}),
    'racks': None,
    'nodes': None,
    'node_defaults': frozenset({'max_power_w', 'idle_power_w', 'cpu', 'gpu', 'mem', 'other'}),
    'powercap': frozenset({'kp', 'ki', 'alpha', 'beta', 'knob_min', 'control_period_s'}),
    'scheduler': frozenset({
        'system_cap_w', 'backfill', 'reactive', 'safety_margin',
        'default_w_per_node', 'gate_idle_components',
    }),
    'telemetry': frozenset({
        'bits', 'full_scale_w', 'raw_rate_hz', 'decimation_factor', 'noise_amplitude_w',
        'clock_offset_ns', 'clock_drift_ppm', 'sync_error_ns', 'sync_interval_s',
        'component_channels', 'record', 'topic_root',
    }),
    'workload': frozenset({
        'cores_per_node', 'power_min_w', 'power_max_w', 'phase_amplitude', 'slowdown_threshold_s',
    }),
}

# Parameterised sections: "[node <id>]" and "[component <kind>]"
PREFIXED_SECTION_KEYS: Dict[str, FrozenSet[str]] = {
    'node': frozenset({'rack', 'max_power_w', 'idle_power_w', 'cpu', 'gpu', 'mem', 'other'}),
    'component': frozenset({'idle_power_w', 'max_power_w', 'sleep_power_w'}),
}

_SECTION_RE = re.compile(r'^\s*\[(?P<name>[^\]]+)\]')
_KEY_RE = re.compile(r'^\s*(?P<key>[^=#\s][^=#]*?)\s*(=|$|#)')


class IniDocument:
    """Parsed INI text with line-aware, typed accessors."""

    def __init__(self, parser: configparser.ConfigParser, text: str):
        self._parser = parser
        self._lines = text.splitlines()

    def sections(self) -> List[str]:
        return self._parser.sections()

    def has_section(self, section: str) -> bool:
        return self._parser.has_section(section)

    def keys(self, section: str) -> List[str]:
        return list(self._parser[section].keys()) if self.has_section(section) else []

    def raw(self, section: str, key: str) -> Optional[str]:
        return self._parser.get(section, key, fallback=None)

    def lineno(self, section: str, key: Optional[str] = None) -> Optional[int]:
        """1-based line of a section header, or of a key inside that section."""
        current = None
        for number, line in enumerate(self._lines, start=1):
            header = _SECTION_RE.match(line)
            if header:
                current = header.group('name').strip()
                if key is None and current == section:
                    return number
                continue
            if current == section and key is not None:
                match = _KEY_RE.match(line)
                if match and match.group('key') == key:
                    return number
        return None

    def check_keys(self, section: str, allowed: FrozenSet[str]):
        for key in self.keys(section):
            if key not in allowed:
                raise ConfigError(
                    f"unknown key '{key}' in [{section}]", self.lineno(section, key)
                )

    def get_float(self, section: str, key: str, default: Optional[float]) -> Optional[float]:
        value = self.raw(section, key)
        if value is None or value == '':
            return default
        try:
            return float(value)
        except ValueError:
            raise ConfigError(
                f"[{section}] {key}: expected a number, got '{value}'", self.lineno(section, key)
            )

    def get_int(self, section: str, key: str, default: Optional[int]) -> Optional[int]:
        value = self.raw(section, key)
        if value is None or value == '':
            return default
        try:
            return int(value)
        except ValueError:
            raise ConfigError(
                f"[{section}] {key}: expected an integer, got '{value}'", self.lineno(section, key)
            )

    def get_bool(self, section: str, key: str, default: bool) -> bool:
        value = self.raw(section, key)
        if value is None or value == '':
            return default
        try:
            return self._parser.getboolean(section, key)
        except ValueError:
            raise ConfigError(
                f"[{section}] {key}: expected on/off, got '{value}'", self.lineno(section, key)
            )

    def get_str(self, section: str, key: str, default: str) -> str:
        value = self.raw(section, key)
        return default if value is None or value == '' else value


def read_ini(text: str) -> IniDocument:
    """
    Parse INI text and check section names.

    Raises:
        ConfigError with the offending line number
    """
    parser = configparser.ConfigParser(
        interpolation=None,
        strict=True,
        allow_no_value=True,
        delimiters=('=',),
        comment_prefixes=('#',),
        inline_comment_prefixes=('#',),
        default_section='__defaults__',
        empty_lines_in_values=False,
    )
    parser.optionxform = str  # keys are case-sensitive

    try:
        parser.read_string(text)
    except configparser.DuplicateSectionError as e:
        if e.section.startswith('node '):
            raise ConfigError(f"duplicate node_id '{e.section[5:].strip()}'", e.lineno)
        raise ConfigError(f"duplicate section [{e.section}]", e.lineno)
    except configparser.DuplicateOptionError as e:
        if e.section == 'nodes':
            raise ConfigError(f"duplicate node_id '{e.option}'", e.lineno)
        raise ConfigError(f"duplicate key '{e.option}' in [{e.section}]", e.lineno)
    except configparser.MissingSectionHeaderError as e:
        raise ConfigError("content before the first section header", e.lineno)
    except configparser.ParsingError as e:
        lineno = e.errors[0][0] if e.errors else None
        raise ConfigError("cannot parse line", lineno)

    doc = IniDocument(parser, text)
    for section in doc.sections():
        prefix = section.split(' ', 1)[0]
        if section in SECTION_KEYS:
            allowed = SECTION_KEYS[section]
        elif ' ' in section and prefix in PREFIXED_SECTION_KEYS:
            allowed = PREFIXED_SECTION_KEYS[prefix]
        else:
            raise ConfigError(f"unknown section [{section}]", doc.lineno(section))
        if allowed is not None:
            doc.check_keys(section, allowed)
    return doc


@dataclass(frozen=True)
class PowerCapConfig:
    """Node-level controller gains and power-model exponents."""
    kp: float = 0.5
    ki: float = 0.2
    alpha: float = 3.0
    beta: float = 1.0
    knob_min: float = 0.3
    control_period_s: float = 1.0


@dataclass(frozen=True)
class SchedulerConfig:
    """Dispatcher policy switches."""
    system_cap_w: Optional[float] = None  # None: use the cluster's system cap
    backfill: bool = True
    reactive: bool = True
    safety_margin: float = 1.0
    default_w_per_node: Optional[float] = None  # None: node TDP
    gate_idle_components: bool = False
    oracle_predictor: bool = False


@dataclass(frozen=True)
class TelemetryConfig:
    """Energy-gateway sampling and clock settings."""
    bits: int = 12
    full_scale_w: float = 4095.0
    raw_rate_hz: int = 800_000
    decimation_factor: int = 16
    noise_amplitude_w: float = 0.0
    clock_offset_ns: int = 0       # max |initial offset| drawn per node
    clock_drift_ppm: float = 0.0   # max |drift| drawn per node
    sync_error_ns: int = 0
    sync_interval_s: int = 1
    component_channels: bool = False
    record: bool = True
    topic_root: str = 'davide'

    def adc(self):
        from .telemetry import AdcSpec
        return AdcSpec(
            bits=self.bits,
            full_scale_w=self.full_scale_w,
            raw_rate_hz=self.raw_rate_hz,
            decimation_factor=self.decimation_factor,
            noise_amplitude_w=self.noise_amplitude_w,
        )


@dataclass(frozen=True)
class WorkloadConfig:
    """Trace ingestion and synthetic power settings."""
    cores_per_node: int = 16
    power_min_w: Optional[float] = None  # None: node idle power
    power_max_w: Optional[float] = None  # None: node max power
    phase_amplitude: float = 0.0
    slowdown_threshold_s: float = 10.0


@dataclass(frozen=True)
class RunConfig:
    """Everything a simulation needs besides the workload and the seed."""
    cluster: 'object'
    powercap: PowerCapConfig = field(default_factory=PowerCapConfig)
    scheduler: SchedulerConfig = field(default_factory=SchedulerConfig)
    telemetry: TelemetryConfig = field(default_factory=TelemetryConfig)
    workload: WorkloadConfig = field(default_factory=WorkloadConfig)

    @property
    def system_cap_w(self) -> float:
        if self.scheduler.system_cap_w is not None:
            return self.scheduler.system_cap_w
        return self.cluster.system_cap

    def with_scheduler(self, **changes) -> 'RunConfig':
        return replace(self, scheduler=replace(self.scheduler, **changes))


def _load_powercap(doc: IniDocument) -> PowerCapConfig:
    base = PowerCapConfig()
    s = 'powercap'
    cfg = PowerCapConfig(
        kp=doc.get_float(s, 'kp', base.kp),
        ki=doc.get_float(s, 'ki', base.ki),
        alpha=doc.get_float(s, 'alpha', base.alpha),
        beta=doc.get_float(s, 'beta', base.beta),
        knob_min=doc.get_float(s, 'knob_min', base.knob_min),
        control_period_s=doc.get_float(s, 'control_period_s', base.control_period_s),
    )
    if not 0.0 < cfg.knob_min <= 1.0:
        raise ConfigError("[powercap] knob_min must be in (0, 1]", doc.lineno(s, 'knob_min'))
    if cfg.alpha <= 0 or cfg.beta <= 0:
        raise ConfigError("[powercap] alpha and beta must be positive", doc.lineno(s))
    if cfg.control_period_s <= 0 or not float(cfg.control_period_s * 1e9).is_integer():
        raise ConfigError(
            "[powercap] control_period_s must be a positive whole number of nanoseconds",
            doc.lineno(s, 'control_period_s'),
        )
    return cfg


def _load_scheduler(doc: IniDocument) -> SchedulerConfig:
    base = SchedulerConfig()
    s = 'scheduler'
    cfg = SchedulerConfig(
        system_cap_w=doc.get_float(s, 'system_cap_w', base.system_cap_w),
        backfill=doc.get_bool(s, 'backfill', base.backfill),
        reactive=doc.get_bool(s, 'reactive', base.reactive),
        safety_margin=doc.get_float(s, 'safety_margin', base.safety_margin),
        default_w_per_node=doc.get_float(s, 'default_w_per_node', base.default_w_per_node),
        gate_idle_components=doc.get_bool(s, 'gate_idle_components', base.gate_idle_components),
    )
    if cfg.safety_margin < 1.0:
        raise ConfigError("[scheduler] safety_margin must be >= 1", doc.lineno(s, 'safety_margin'))
    if cfg.system_cap_w is not None and cfg.system_cap_w <= 0:
        raise ConfigError("[scheduler] system_cap_w must be positive", doc.lineno(s, 'system_cap_w'))
    return cfg


def _load_telemetry(doc: IniDocument) -> TelemetryConfig:
    base = TelemetryConfig()
    s = 'telemetry'
    cfg = TelemetryConfig(
        bits=doc.get_int(s, 'bits', base.bits),
        full_scale_w=doc.get_float(s, 'full_scale_w', base.full_scale_w),
        raw_rate_hz=doc.get_int(s, 'raw_rate_hz', base.raw_rate_hz),
        decimation_factor=doc.get_int(s, 'decimation_factor', base.decimation_factor),
        noise_amplitude_w=doc.get_float(s, 'noise_amplitude_w', base.noise_amplitude_w),
        clock_offset_ns=doc.get_int(s, 'clock_offset_ns', base.clock_offset_ns),
        clock_drift_ppm=doc.get_float(s, 'clock_drift_ppm', base.clock_drift_ppm),
        sync_error_ns=doc.get_int(s, 'sync_error_ns', base.sync_error_ns),
        sync_interval_s=doc.get_int(s, 'sync_interval_s', base.sync_interval_s),
        component_channels=doc.get_bool(s, 'component_channels', base.component_channels),
        record=doc.get_bool(s, 'record', base.record),
        topic_root=doc.get_str(s, 'topic_root', base.topic_root),
    )
    if cfg.sync_interval_s < 1:
        raise ConfigError("[telemetry] sync_interval_s must be >= 1", doc.lineno(s, 'sync_interval_s'))
    if cfg.sync_error_ns < 0:
        raise ConfigError("[telemetry] sync_error_ns must be >= 0", doc.lineno(s, 'sync_error_ns'))
    try:
        cfg.adc()
    except Exception as e:
        raise ConfigError(f"[telemetry] {e}", doc.lineno(s))
    return cfg


def _load_workload(doc: IniDocument) -> WorkloadConfig:
    base = WorkloadConfig()
    s = 'workload'
    cfg = WorkloadConfig(
        cores_per_node=doc.get_int(s, 'cores_per_node', base.cores_per_node),
        power_min_w=doc.get_float(s, 'power_min_w', base.power_min_w),
        power_max_w=doc.get_float(s, 'power_max_w', base.power_max_w),
        phase_amplitude=doc.get_float(s, 'phase_amplitude', base.phase_amplitude),
        slowdown_threshold_s=doc.get_float(s, 'slowdown_threshold_s', base.slowdown_threshold_s),
    )
    if cfg.cores_per_node < 1:
        raise ConfigError("[workload] cores_per_node must be >= 1", doc.lineno(s, 'cores_per_node'))
    if not 0.0 <= cfg.phase_amplitude < 1.0:
        raise ConfigError("[workload] phase_amplitude must be in [0, 1)", doc.lineno(s, 'phase_amplitude'))
    return cfg


def load_run_config(text: str) -> RunConfig:
    """Parse a full run configuration (cluster + controller + scheduler + telemetry + workload)."""
    from .cluster_model import load_cluster_spec

    doc = read_ini(text)
    cluster = load_cluster_spec(text)
    return RunConfig(
        cluster=cluster,
        powercap=_load_powercap(doc),
        scheduler=_load_scheduler(doc),
        telemetry=_load_telemetry(doc),
        workload=_load_workload(doc),
    )


def load_run_config_file(path: Path) -> RunConfig:
    text = Path(path).read_text(encoding='utf-8')
    logger.debug(f"Loaded config from {path}")
    return load_run_config(text)
