from pathlib import Path

import pytest

from powerstack.errors import WorkloadError
from powerstack.workload import (
    GeneratorParams, Workload, generate_workload, parse_swf, synthetic_power, two_phases,
)

from .helpers import make_job

SAMPLE_SWF = Path(__file__).resolve().parents[2] / 'data' / 'sample.swf'


def test_sample_trace_parses():
    workload = parse_swf(SAMPLE_SWF.read_text())
    jobs = {job.job_id: job for job in workload}

    assert [job.job_id for job in workload] == ['job1', 'job2', 'job4', 'job5', 'job6', 'job7', 'job8']
    assert jobs['job1'].request.nodes_requested == 2
    assert jobs['job1'].request.walltime_req_s == 900
    assert jobs['job7'].request.nodes_requested == 16
    assert jobs['job4'].node_power_w == 1500.0
    assert jobs['job8'].node_power_w == 950.0
    assert jobs['job5'].request.app_tag == 'unknown'
    assert jobs['job2'].request.submit_time_ns == 30 * 1_000_000_000


def test_missing_counts_fall_back():
    job6 = {job.job_id: job for job in parse_swf(SAMPLE_SWF.read_text())}['job6']
    # requested procs and time absent: allocated procs and run time stand in
    assert job6.request.nodes_requested == 3
    assert job6.request.walltime_req_s == 450


def test_synthetic_power_is_stable():
    a = synthetic_power('3', '2', 400.0, 2000.0)
    assert a == synthetic_power('3', '2', 400.0, 2000.0)
    assert 400.0 <= a <= 2000.0
    assert a.is_integer()
    with pytest.raises(WorkloadError):
        synthetic_power('u', 'a', 500.5, 500.7)


def test_wrong_field_count_reports_line():
    text = "; header\n1 0 0 10 16 -1 -1 16 20 -1 1 1 1 1 1 -1 -1 -1\n2 0 0 10\n"
    with pytest.raises(WorkloadError) as exc:
        parse_swf(text)
    assert exc.value.lineno == 3


def test_negative_submit_is_an_error():
    with pytest.raises(WorkloadError, match='negative submit'):
        parse_swf("1 -5 0 10 16 -1 -1 16 20 -1 1 1 1 1 1 -1 -1 -1\n")


def test_non_numeric_field():
    with pytest.raises(WorkloadError) as exc:
        parse_swf("1 0 0 ten 16 -1 -1 16 20 -1 1 1 1 1 1 -1 -1 -1\n")
    assert exc.value.lineno == 1


def test_jobs_sorted_by_submit():
    text = (
        "1 50 0 10 16 -1 -1 16 20 -1 1 1 1 1 1 -1 -1 -1\n"
        "2 10 0 10 16 -1 -1 16 20 -1 1 1 1 1 1 -1 -1 -1\n"
    )
    assert [job.job_id for job in parse_swf(text)] == ['job2', 'job1']


def test_generator_is_deterministic():
    params = GeneratorParams(max_nodes=4)
    a = generate_workload(50, params, seed=7)
    b = generate_workload(50, params, seed=7)
    c = generate_workload(50, params, seed=8)
    assert a == b
    assert a != c
    assert len(a) == 50
    assert all(1 <= job.request.nodes_requested <= 4 for job in a)
    assert all(job.request.walltime_req_s >= job.runtime_s for job in a)


def test_generator_power_is_keyed():
    workload = generate_workload(200, GeneratorParams(n_users=2, n_apps=2), seed=1)
    by_key = {}
    for job in workload:
        by_key.setdefault((job.request.user, job.request.app_tag), set()).add(job.node_power_w)
    assert all(len(powers) == 1 for powers in by_key.values())


def test_generator_rejects_bad_params():
    with pytest.raises(WorkloadError):
        GeneratorParams(walltime_factor=0.5)
    with pytest.raises(WorkloadError):
        generate_workload(-1)


def test_two_phases_keep_the_mean():
    phases = two_phases(1000.0, 0.3, 400.0, 2000.0)
    assert phases == ((0.5, 1300.0), (0.5, 700.0))
    assert sum(f * w for f, w in phases) == 1000.0
    # clipped by the power range
    assert two_phases(1900.0, 0.3, 400.0, 2000.0) == ((0.5, 2000.0), (0.5, 1800.0))
    assert two_phases(1000.0, 0.0, 400.0, 2000.0) == ()


def test_workload_checks():
    with pytest.raises(WorkloadError, match='duplicate'):
        Workload((make_job('j1'), make_job('j1')))
    with pytest.raises(WorkloadError, match='predecessor'):
        Workload((make_job('j1', submit_s=10), make_job('j2', submit_s=5)))
    with pytest.raises(WorkloadError, match='phase fractions'):
        make_job('j1', phases=((0.5, 100.0),))
    with pytest.raises(WorkloadError, match='cluster has 2'):
        Workload((make_job('j1', nodes=3),)).check_fits(2)
