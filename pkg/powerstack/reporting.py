"""
Run directory artifacts.

A simulation run directory holds jobs.csv, timeline.csv, decisions.csv,
ledger.csv, history.csv, summary.csv, telemetry.log (when recorded) and a
manifest. The summary printed by the CLI is built from the same formatted
strings that summary.csv stores.
"""

import csv
import hashlib
import logging
import math
from dataclasses import MISSING, asdict, dataclass, fields
from pathlib import Path
from typing import Dict, List, Optional, TextIO

from .accounting import fmt_joules, fmt_seconds, fmt_watts, write_ledger_csv
from .dispatcher import write_decisions_csv
from .errors import ManifestError
from .predictor import write_history
from . import __version__
from .sim import SimReport

logger = logging.getLogger(__name__)

ARTIFACT_VERSION = __version__

JOBS_CSV = 'jobs.csv'
TIMELINE_CSV = 'timeline.csv'
DECISIONS_CSV = 'decisions.csv'
LEDGER_CSV = 'ledger.csv'
HISTORY_CSV = 'history.csv'
SUMMARY_CSV = 'summary.csv'
TELEMETRY_LOG = 'telemetry.log'
MANIFEST = 'manifest'

JOB_COLUMNS = [
    'job_id', 'user', 'app_tag', 'nodes', 'status', 'tier', 'submit_s', 'start_s', 'end_s',
    'wait_s', 'runtime_s', 'bounded_slowdown', 'predicted_w', 'energy_j', 'mean_power_w',
]
TIMELINE_COLUMNS = ['time_s', 'predicted_w', 'measured_w', 'cap_w']
SUMMARY_KEYS = ['jobs', 'makespan_s', 'energy_j', 'violation_fraction']


def _opt(value: Optional[float], fmt) -> str:
    return '' if value is None else fmt(value)


def write_jobs_csv(report: SimReport, out: TextIO):
    writer = csv.writer(out, lineterminator='\n')
    writer.writerow(JOB_COLUMNS)
    for o in report.outcomes:
        writer.writerow([
            o.job_id, o.user, o.app_tag, o.nodes, o.status, o.tier,
            fmt_seconds(o.submit_ns),
            _opt(o.start_ns, fmt_seconds),
            _opt(o.end_ns, fmt_seconds),
            _opt(o.wait_s, lambda v: f"{v:.6f}"),
            _opt(o.runtime_s, lambda v: f"{v:.6f}"),
            _opt(o.bounded_slowdown, lambda v: f"{v:.6f}"),
            fmt_watts(o.predicted_w),
            fmt_joules(o.energy_j),
            _opt(o.mean_power_w, fmt_watts),
        ])


def write_timeline_csv(report: SimReport, out: TextIO):
    """One row per control tick over the whole run."""
    writer = csv.writer(out, lineterminator='\n')
    writer.writerow(TIMELINE_COLUMNS)
    cap = fmt_watts(report.system_cap_w)
    for row in report.timeline:
        predicted = fmt_watts(row.predicted_w)
        measured = fmt_watts(row.measured_w)
        for k in range(row.ticks):
            writer.writerow([fmt_seconds(row.start_ns + k * report.tick_ns), predicted, measured, cap])


def summarize(report: SimReport) -> Dict[str, str]:
    """Headline numbers as the exact strings written to summary.csv."""
    completed = report.completed
    waits = [o.wait_s for o in completed]
    slowdowns = [o.bounded_slowdown for o in completed]
    return {
        'jobs': str(len(report.outcomes)),
        'completed': str(len(completed)),
        'rejected': str(len(report.outcomes) - len(completed)),
        'makespan_s': fmt_seconds(report.makespan_ns),
        'energy_j': fmt_joules(report.ledger.total_j),
        'idle_energy_j': fmt_joules(report.ledger.idle_j),
        'facility_energy_j': fmt_joules(report.ledger.facility_energy_j()),
        'violation_fraction': f"{report.violations.fraction:.4f}",
        'max_overshoot_w': fmt_watts(report.violations.max_overshoot_w),
        'peak_measured_w': fmt_watts(report.peak_measured_w),
        'cap_directives': str(report.directives_issued),
        'unshed_w_max': fmt_watts(report.unshed_w_max),
        'mean_wait_s': f"{math.fsum(waits) / len(waits):.6f}" if waits else fmt_seconds(0),
        'mean_bounded_slowdown': f"{math.fsum(slowdowns) / len(slowdowns):.6f}" if slowdowns else '',
        'seed': str(report.seed),
    }


def summary_line(summary: Dict[str, str]) -> str:
    return ' '.join(f"{key}={summary[key]}" for key in SUMMARY_KEYS)


def write_summary_csv(summary: Dict[str, str], out: TextIO):
    writer = csv.writer(out, lineterminator='\n')
    writer.writerow(['key', 'value'])
    for key, value in summary.items():
        writer.writerow([key, value])


def read_summary_csv(path: Path) -> Dict[str, str]:
    with open(path, newline='', encoding='utf-8') as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header != ['key', 'value']:
            raise ManifestError(f"{path}: not a summary file")
        return {row[0]: row[1] for row in reader if len(row) == 2}


# -- manifest --------------------------------------------------------------

def sha256_file(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, 'rb') as f:
        for chunk in iter(lambda: f.read(65536), b''):
            digest.update(chunk)
    return digest.hexdigest()


@dataclass(frozen=True)
class RunManifest:
    """What is needed to reproduce a run byte for byte."""
    version: str
    config_path: str
    config_sha256: str
    workload: str  # a trace path, or synthetic:<n_jobs>
    workload_sha256: str
    seed: int
    out_dir: str
    oracle_predictor: bool = False
    backfill: bool = True
    reactive: bool = True
    system_cap_w: str = ''  # empty: use the config
    model: str = ''  # empty: untrained predictor
    model_sha256: str = ''

    def verify(self):
        """
        Recompute the recorded hashes.

        Raises:
            ManifestError: a referenced file is missing or has changed
        """
        self._check(self.config_path, self.config_sha256)
        if not self.workload.startswith('synthetic:'):
            self._check(self.workload, self.workload_sha256)
        if self.model:
            self._check(self.model, self.model_sha256)

    @staticmethod
    def _check(path: str, expected: str):
        p = Path(path)
        if not p.is_file():
            raise ManifestError(f"{path} referenced by the manifest does not exist")
        actual = sha256_file(p)
        if actual != expected:
            raise ManifestError(f"{path} changed since the run (sha256 {actual[:12]}, recorded {expected[:12]})")


def write_manifest(manifest: RunManifest, path: Path):
    with open(path, 'w', encoding='utf-8', newline='\n') as f:
        for key, value in asdict(manifest).items():
            if isinstance(value, bool):
                value = 'true' if value else 'false'
            f.write(f"{key}={value}\n")


def read_manifest(path: Path) -> RunManifest:
    """
    Parse a key=value manifest.

    Raises:
        ManifestError: unreadable file, unknown or missing keys, bad values
    """
    try:
        text = Path(path).read_text(encoding='utf-8')
    except OSError as e:
        raise ManifestError(f"cannot read manifest {path}: {e}")

    known = {f.name: f for f in fields(RunManifest)}
    values: Dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        key, sep, value = line.partition('=')
        if not sep or key not in known:
            raise ManifestError(f"{path}:{lineno}: unexpected line '{line}'")
        values[key] = value

    missing = [name for name, f in known.items() if name not in values and f.default is MISSING]
    if missing:
        raise ManifestError(f"{path}: missing {', '.join(missing)}")
    try:
        seed = int(values['seed'])
    except ValueError:
        raise ManifestError(f"{path}: seed '{values['seed']}' is not an integer")
    flags = {}
    for name in ('oracle_predictor', 'backfill', 'reactive'):
        if name in values:
            if values[name] not in ('true', 'false'):
                raise ManifestError(f"{path}: {name} must be true or false")
            flags[name] = values[name] == 'true'
    return RunManifest(
        version=values['version'],
        config_path=values['config_path'],
        config_sha256=values['config_sha256'],
        workload=values['workload'],
        workload_sha256=values['workload_sha256'],
        seed=seed,
        out_dir=values['out_dir'],
        system_cap_w=values.get('system_cap_w', ''),
        model=values.get('model', ''),
        model_sha256=values.get('model_sha256', ''),
        **flags,
    )


def write_run(report: SimReport, out_dir: Path, manifest: Optional[RunManifest] = None) -> List[Path]:
    """Write every artifact of a run; returns the files written."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []

    def _csv(name, writer, *args):
        path = out_dir / name
        with open(path, 'w', encoding='utf-8', newline='') as f:
            writer(*args, f)
        written.append(path)

    _csv(JOBS_CSV, write_jobs_csv, report)
    _csv(TIMELINE_CSV, write_timeline_csv, report)
    _csv(DECISIONS_CSV, write_decisions_csv, report.decisions)
    _csv(LEDGER_CSV, write_ledger_csv, report.ledger)
    _csv(HISTORY_CSV, write_history, report.history)
    _csv(SUMMARY_CSV, write_summary_csv, summarize(report))

    if report.telemetry_lines:
        path = out_dir / TELEMETRY_LOG
        with open(path, 'w', encoding='ascii', newline='\n') as f:
            f.writelines(line + '\n' for line in report.telemetry_lines)
        written.append(path)
    if manifest is not None:
        path = out_dir / MANIFEST
        write_manifest(manifest, path)
        written.append(path)
    logger.info(f"Wrote {len(written)} artifacts to {out_dir}")
    return written
