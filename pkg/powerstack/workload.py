"""
Workloads: SWF trace ingestion and reproducible synthetic generation.

A workload job is a request plus its ground truth: nominal runtime and
true per-node power (optionally two work phases around that mean).
"""

import math
import hashlib
import logging
from dataclasses import dataclass
from typing import Iterator, List, Optional, Sequence, Tuple

import numpy as np

from .errors import WorkloadError
from .predictor import JobRequest
from .telemetry import NS_PER_S

logger = logging.getLogger(__name__)

SWF_FIELDS = 18
SWF_FIELDS_WITH_POWER = 19

# 1-based SWF field numbers
F_JOB_ID = 1
F_SUBMIT = 2
F_RUN_TIME = 4
F_ALLOC_PROCS = 5
F_REQ_PROCS = 8
F_REQ_TIME = 9
F_USER = 12
F_APP = 14


@dataclass(frozen=True)
class WorkloadJob:
    request: JobRequest
    node_power_w: float  # true mean per-node power
    runtime_s: float     # nominal runtime at full speed
    # (fraction of work, per-node watts); empty means constant at node_power_w
    phases: Tuple[Tuple[float, float], ...] = ()

    def __post_init__(self):
        if self.runtime_s <= 0:
            raise WorkloadError(f"job {self.request.job_id}: runtime must be > 0")
        if self.node_power_w < 0:
            raise WorkloadError(f"job {self.request.job_id}: negative power")
        if self.phases and not math.isclose(math.fsum(f for f, _ in self.phases), 1.0):
            raise WorkloadError(f"job {self.request.job_id}: phase fractions must sum to 1")

    @property
    def job_id(self) -> str:
        return self.request.job_id

    def power_profile(self) -> Tuple[Tuple[float, float], ...]:
        return self.phases or ((1.0, self.node_power_w),)


@dataclass(frozen=True)
class Workload:
    jobs: Tuple[WorkloadJob, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, 'jobs', tuple(self.jobs))
        seen = set()
        previous = None
        for job in self.jobs:
            if job.job_id in seen:
                raise WorkloadError(f"duplicate job id {job.job_id}")
            seen.add(job.job_id)
            submit = job.request.submit_time_ns
            if previous is not None and submit < previous:
                raise WorkloadError(f"job {job.job_id} submitted before its predecessor")
            previous = submit

    def __len__(self) -> int:
        return len(self.jobs)

    def __iter__(self) -> Iterator[WorkloadJob]:
        return iter(self.jobs)

    def check_fits(self, n_nodes: int):
        """Raise WorkloadError if a job asks for more nodes than the cluster has."""
        for job in self.jobs:
            if job.request.nodes_requested > n_nodes:
                raise WorkloadError(
                    f"job {job.job_id} requests {job.request.nodes_requested} nodes, cluster has {n_nodes}"
                )


def synthetic_power(user: str, app_tag: str, power_min_w: float, power_max_w: float) -> float:
    """Whole-watt power in [min, max], a fixed function of (user, app_tag)."""
    lo = math.ceil(power_min_w)
    hi = math.floor(power_max_w)
    if hi < lo:
        raise WorkloadError(f"empty power range [{power_min_w}, {power_max_w}]")
    digest = hashlib.sha256(f"{user}|{app_tag}".encode('utf-8')).digest()
    return float(lo + int.from_bytes(digest[:8], 'big') % (hi - lo + 1))


def two_phases(power_w: float, amplitude: float, power_min_w: float, power_max_w: float) -> Tuple[Tuple[float, float], ...]:
    """Equal-work high/low phases whose work-weighted mean is power_w."""
    if amplitude <= 0:
        return ()
    delta = math.floor(min(amplitude * power_w, power_max_w - power_w, power_w - power_min_w))
    if delta <= 0:
        return ()
    return ((0.5, power_w + delta), (0.5, power_w - delta))


def _int_field(fields: Sequence[str], number: int, lineno: int) -> int:
    text = fields[number - 1]
    try:
        return int(text)
    except ValueError:
        try:
            value = float(text)
        except ValueError:
            raise WorkloadError(f"field {number} is not a number: '{text}'", lineno)
        if not value.is_integer():
            raise WorkloadError(f"field {number} is not an integer: '{text}'", lineno)
        return int(value)


def parse_swf(
    text: str,
    cores_per_node: int = 16,
    power_min_w: float = 400.0,
    power_max_w: float = 2000.0,
    phase_amplitude: float = 0.0,
) -> Workload:
    """
    Parse a Standard Workload Format trace.

    Lines starting with ';' are comments. Data lines have 18 fields, or 19
    where the extra field is the job's measured per-node power. Jobs with
    unknown or non-positive run time are skipped with a warning.

    Raises:
        WorkloadError: wrong field count or non-numeric fields (with line number)
    """
    if cores_per_node < 1:
        raise WorkloadError("cores_per_node must be >= 1")
    entries = []
    skipped = 0
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith(';'):
            continue
        fields = stripped.split()
        if len(fields) not in (SWF_FIELDS, SWF_FIELDS_WITH_POWER):
            raise WorkloadError(f"expected {SWF_FIELDS} fields, got {len(fields)}", lineno)

        job_number = _int_field(fields, F_JOB_ID, lineno)
        run_time = _int_field(fields, F_RUN_TIME, lineno)
        if run_time <= 0:
            logger.warning(f"line {lineno}: job {job_number} has run time {run_time}, skipped")
            skipped += 1
            continue
        procs = _int_field(fields, F_REQ_PROCS, lineno)
        if procs <= 0:
            procs = _int_field(fields, F_ALLOC_PROCS, lineno)
        if procs <= 0:
            logger.warning(f"line {lineno}: job {job_number} has no processor count, skipped")
            skipped += 1
            continue
        submit = _int_field(fields, F_SUBMIT, lineno)
        if submit < 0:
            raise WorkloadError(f"negative submit time {submit}", lineno)
        req_time = _int_field(fields, F_REQ_TIME, lineno)
        walltime = req_time if req_time > 0 else run_time
        user = str(_int_field(fields, F_USER, lineno))
        app = _int_field(fields, F_APP, lineno)
        app_tag = 'unknown' if app == -1 else str(app)

        if len(fields) == SWF_FIELDS_WITH_POWER:
            try:
                power = float(fields[-1])
            except ValueError:
                raise WorkloadError(f"power field is not a number: '{fields[-1]}'", lineno)
            if not 0 <= power or not math.isfinite(power):
                raise WorkloadError(f"invalid power {fields[-1]}", lineno)
        else:
            power = synthetic_power(user, app_tag, power_min_w, power_max_w)

        request = JobRequest(
            job_id=f"job{job_number}",
            user=user,
            app_tag=app_tag,
            nodes_requested=-(-procs // cores_per_node),
            walltime_req_s=walltime,
            submit_time_ns=submit * NS_PER_S,
        )
        phases = two_phases(power, phase_amplitude, power_min_w, power_max_w)
        entries.append((request.submit_time_ns, lineno, WorkloadJob(request, power, float(run_time), phases)))

    entries.sort(key=lambda e: (e[0], e[1]))
    if skipped:
        logger.info(f"Parsed {len(entries)} jobs, skipped {skipped}")
    return Workload(tuple(job for _, _, job in entries))


@dataclass(frozen=True)
class GeneratorParams:
    """Synthetic workload shape. Times are whole seconds."""
    mean_interarrival_s: float = 60.0
    runtime_mean_s: float = 600.0
    runtime_min_s: int = 10
    runtime_max_s: int = 7200
    walltime_factor: float = 1.5
    max_nodes: int = 8
    n_users: int = 10
    n_apps: int = 5
    power_min_w: float = 400.0
    power_max_w: float = 2000.0
    phase_amplitude: float = 0.0

    def __post_init__(self):
        if self.mean_interarrival_s < 0 or self.runtime_mean_s <= 0:
            raise WorkloadError("interarrival and runtime means must be positive")
        if not 1 <= self.runtime_min_s <= self.runtime_max_s:
            raise WorkloadError("need 1 <= runtime_min_s <= runtime_max_s")
        if self.walltime_factor < 1:
            raise WorkloadError("walltime_factor must be >= 1")
        if self.max_nodes < 1 or self.n_users < 1 or self.n_apps < 1:
            raise WorkloadError("max_nodes, n_users and n_apps must be >= 1")
        if math.floor(self.power_max_w) < math.ceil(self.power_min_w):
            raise WorkloadError("empty power range")


def generate_workload(n_jobs: int, params: Optional[GeneratorParams] = None, seed: int = 0) -> Workload:
    """
    Reproducible synthetic workload.

    Per-node power is a fixed whole-watt value per (user, app) pair drawn
    from [power_min_w, power_max_w], so keyed-mean predictors become exact
    after one observation per pair.
    """
    if n_jobs < 0:
        raise WorkloadError(f"n_jobs must be >= 0, got {n_jobs}")
    params = params or GeneratorParams()
    rng = np.random.default_rng(seed)

    power_table = rng.integers(
        math.ceil(params.power_min_w), math.floor(params.power_max_w) + 1,
        size=(params.n_users, params.n_apps),
    )
    gaps = rng.exponential(params.mean_interarrival_s, n_jobs) if params.mean_interarrival_s > 0 \
        else np.zeros(n_jobs)
    submits = np.floor(np.cumsum(gaps)).astype(np.int64)
    runtimes = np.clip(
        np.rint(rng.exponential(params.runtime_mean_s, n_jobs)),
        params.runtime_min_s, params.runtime_max_s,
    ).astype(np.int64)
    nodes = rng.integers(1, params.max_nodes + 1, size=n_jobs)
    users = rng.integers(0, params.n_users, size=n_jobs)
    apps = rng.integers(0, params.n_apps, size=n_jobs)

    jobs: List[WorkloadJob] = []
    for i in range(n_jobs):
        power = float(power_table[users[i], apps[i]])
        runtime = int(runtimes[i])
        request = JobRequest(
            job_id=f"job{i + 1:06d}",
            user=f"user{int(users[i]):02d}",
            app_tag=f"app{int(apps[i]):02d}",
            nodes_requested=int(nodes[i]),
            walltime_req_s=math.ceil(runtime * params.walltime_factor),
            submit_time_ns=int(submits[i]) * NS_PER_S,
        )
        phases = two_phases(power, params.phase_amplitude, params.power_min_w, params.power_max_w)
        jobs.append(WorkloadJob(request, power, float(runtime), phases))
    return Workload(tuple(jobs))
