"""
Shared test fixtures and helpers for the powerstack test suite.
"""
from dataclasses import replace

from powerstack.cluster_model import default_cluster_spec
from powerstack.config import RunConfig, load_run_config
from powerstack.predictor import JobRecord, JobRequest
from powerstack.telemetry import NS_PER_S
from powerstack.workload import Workload, WorkloadJob

SMALL_CONFIG = """\
[system]
system_cap_w = 6000
rack_cap_w = 32000

[racks]
r1

[nodes]
node01 = r1
node02 = r1
node03 = r1
node04 = r1

[scheduler]
safety_margin = 1.0
"""


def make_request(job_id="job1", user="alice", app_tag="lammps", nodes=1, walltime_s=100, submit_s=0):
    """JobRequest with sensible defaults; submit time is given in seconds."""
    return JobRequest(
        job_id=job_id,
        user=user,
        app_tag=app_tag,
        nodes_requested=nodes,
        walltime_req_s=walltime_s,
        submit_time_ns=submit_s * NS_PER_S,
    )


def make_job(job_id="job1", power_w=2000.0, runtime_s=100.0, phases=(), **kwargs):
    """WorkloadJob with sensible defaults; extra kwargs go to make_request."""
    kwargs.setdefault('walltime_s', max(1, int(runtime_s)))
    return WorkloadJob(make_request(job_id, **kwargs), power_w, runtime_s, tuple(phases))


def make_record(job_id="job1", user="alice", app_tag="lammps", nodes=1, mean_power_w=1000.0, runtime_s=50.0):
    request = make_request(job_id, user, app_tag, nodes)
    return JobRecord(request, runtime_s, mean_power_w, tuple([mean_power_w / nodes] * nodes))


def workload_of(*jobs):
    return Workload(tuple(jobs))


def default_run_config(**scheduler):
    """The 45-node default machine, every option at its default."""
    config = RunConfig(cluster=default_cluster_spec())
    return config.with_scheduler(**scheduler) if scheduler else config


def small_run_config(**scheduler):
    config = load_run_config(SMALL_CONFIG)
    return config.with_scheduler(**scheduler) if scheduler else config


def with_telemetry(config, **changes):
    return replace(config, telemetry=replace(config.telemetry, **changes))


def with_workload(config, **changes):
    return replace(config, workload=replace(config.workload, **changes))


def with_powercap(config, **changes):
    return replace(config, powercap=replace(config.powercap, **changes))

