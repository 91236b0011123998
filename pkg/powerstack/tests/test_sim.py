import pytest

from powerstack.errors import ConfigError, SimulationError, WorkloadError
from powerstack.powercap import dilated_runtime
from powerstack.predictor import PowerModel
from powerstack.sim import STATUS_COMPLETED, STATUS_REJECTED, TIER_ORACLE, ClusterSimulator, run
from powerstack.workload import GeneratorParams, generate_workload

from .helpers import (
    default_run_config, make_job, small_run_config, with_powercap, with_telemetry, workload_of,
)

SECOND = 1_000_000_000


def _run(config, workload, seed=0, model=None):
    return run(config.cluster, workload, config, seed, model)


def test_single_job_closed_form():
    config = default_run_config()
    report = _run(config, workload_of(make_job('job1', power_w=2000.0, runtime_s=100.0)))

    outcome = report.outcomes[0]
    assert outcome.status == STATUS_COMPLETED
    assert (outcome.start_ns, outcome.end_ns) == (0, 100 * SECOND)
    assert outcome.energy_j == pytest.approx(200_000.0, rel=1e-12)
    assert report.run_end_ns == 100 * SECOND
    assert report.makespan_ns == 100 * SECOND
    # one busy node plus 44 idle ones
    assert {row.measured_w for row in report.timeline} == {19_600.0}
    assert report.violations.ticks_over == 0
    assert report.directives_issued == 0


def test_timeline_energy_matches_ledger():
    report = _run(default_run_config(), workload_of(make_job('job1', power_w=2000.0, runtime_s=100.0)))
    assert report.ledger.total_j == pytest.approx(1.96e6)
    assert report.timeline_energy_j() == pytest.approx(report.ledger.total_j)
    assert report.ledger.conservation_error() <= 1e-9


def test_history_record_from_run():
    report = _run(default_run_config(), workload_of(make_job('job1', power_w=1200.0, runtime_s=20.0)))
    record = report.history[0]
    assert record.request.job_id == 'job1'
    assert record.actual_runtime_s == pytest.approx(20.0)
    assert record.mean_power_w == pytest.approx(1200.0)
    assert record.node_power_w == pytest.approx((1200.0,))


def test_empty_workload():
    report = _run(small_run_config(), workload_of())
    assert report.makespan_ns == 0
    assert report.run_end_ns == 0
    assert report.ledger.total_j == 0.0
    assert report.outcomes == []


def test_rejected_job_is_reported():
    report = _run(small_run_config(), workload_of(make_job('big', nodes=4)))
    outcome = report.outcomes[0]
    assert outcome.status == STATUS_REJECTED
    assert outcome.start_ns is None
    assert report.history == []


def test_same_seed_same_report():
    config = with_telemetry(small_run_config(), noise_amplitude_w=5.0)
    workload = workload_of(
        make_job('job1', power_w=1400.0, runtime_s=30.0, phases=((0.5, 1800.0), (0.5, 1000.0))),
        make_job('job2', power_w=900.0, runtime_s=12.0, submit_s=3),
    )
    a = _run(config, workload, seed=11)
    b = _run(config, workload, seed=11)
    c = _run(config, workload, seed=12)
    assert a.outcomes == b.outcomes
    assert a.timeline == b.timeline
    assert a.ledger.total_j == b.ledger.total_j
    assert a.timeline != c.timeline


def test_oracle_predictor_never_exceeds_cap():
    config = small_run_config(oracle_predictor=True)
    params = GeneratorParams(mean_interarrival_s=5.0, runtime_mean_s=30.0, max_nodes=4)
    report = _run(config, generate_workload(40, params, seed=3))
    assert report.violations.ticks_total > 0
    assert report.violations.ticks_over == 0
    assert report.violations.fraction == 0.0
    assert all(o.tier == TIER_ORACLE for o in report.outcomes)


def test_under_prediction_triggers_capping():
    # predictor believes 500 W per node, jobs really draw 2000 W
    config = small_run_config()
    workload = workload_of(*[make_job(f"job{i}", power_w=2000.0, runtime_s=100.0, walltime_s=400) for i in range(4)])
    report = _run(config, workload, model=PowerModel(default_w_per_node=500.0))

    assert report.violations.ticks_over > 0
    assert report.directives_issued > 0
    assert report.peak_measured_w > config.system_cap_w
    assert all(o.status == STATUS_COMPLETED for o in report.outcomes)
    # capped nodes run slower than nominal
    assert max(o.runtime_s for o in report.outcomes) > 100.0


def test_gating_lowers_idle_energy():
    workload = workload_of(make_job('job1', power_w=1500.0, runtime_s=50.0))
    plain = _run(small_run_config(), workload)
    gated = _run(small_run_config(gate_idle_components=True), workload)
    assert gated.ledger.idle_j < plain.ledger.idle_j
    assert gated.outcomes[0].energy_j == pytest.approx(plain.outcomes[0].energy_j)


def test_energy_published_on_bus():
    report = _run(small_run_config(), workload_of(make_job('job1', power_w=1000.0, runtime_s=10.0)))
    energy_lines = [line for line in report.telemetry_lines if line.startswith('davide/jobs/')]
    assert len(energy_lines) == 1
    assert energy_lines[0].startswith('davide/jobs/job1/energy 10000000000;')


def test_negative_seed_rejected():
    config = small_run_config()
    with pytest.raises(SimulationError):
        ClusterSimulator(config.cluster, config, seed=-1)


def test_tick_must_be_a_whole_number_of_samples():
    config = with_powercap(small_run_config(), control_period_s=0.00003)
    with pytest.raises(ConfigError):
        ClusterSimulator(config.cluster, config, seed=0)


def test_job_too_wide_for_cluster():
    with pytest.raises(WorkloadError):
        _run(small_run_config(), workload_of(make_job('job1', nodes=5)))


@pytest.mark.parametrize('seed', range(100))
def test_random_workloads_conserve_energy(seed):
    config = small_run_config()
    params = GeneratorParams(mean_interarrival_s=8.0, runtime_mean_s=40.0, max_nodes=3, phase_amplitude=0.2)
    report = _run(config, generate_workload(100, params, seed=seed), seed=seed)
    ledger = report.ledger
    assert ledger.conservation_error() <= 1e-9
    assert ledger.total_j == pytest.approx(report.timeline_energy_j(), rel=1e-9)


def test_oracle_on_default_cluster_needs_no_capping():
    config = default_run_config(oracle_predictor=True)
    report = _run(config, generate_workload(1000, GeneratorParams(mean_interarrival_s=120.0), seed=9))
    assert report.violations.ticks_over == 0
    assert report.directives_issued == 0
    assert len(report.completed) == 1000


def test_lower_cap_trades_wait_for_power():
    params = GeneratorParams(mean_interarrival_s=2.0, runtime_mean_s=300.0)
    workload = generate_workload(300, params, seed=4)

    def mean_wait(report):
        return sum(o.wait_s for o in report.completed) / len(report.completed)

    high = _run(default_run_config(system_cap_w=90_000.0), workload)
    low = _run(default_run_config(system_cap_w=60_000.0), workload)
    assert mean_wait(low) >= mean_wait(high)
    assert low.peak_measured_w <= high.peak_measured_w
    assert low.peak_measured_w <= 60_000.0


def test_oracle_admits_on_quantised_power():
    # 1000.6 W reads as 1001 W; two jobs side by side would measure 2802 W
    base = small_run_config()
    idle_floor = 2 * base.cluster.nodes[0].idle_power
    config = base.with_scheduler(oracle_predictor=True, system_cap_w=2 * 1000.6 + idle_floor + 0.3)
    workload = workload_of(
        make_job('job1', power_w=1000.6, runtime_s=20.0),
        make_job('job2', power_w=1000.6, runtime_s=20.0),
    )
    report = _run(config, workload)

    assert report.violations.ticks_over == 0
    assert report.directives_issued == 0
    assert [o.predicted_w for o in report.outcomes] == [1001.0, 1001.0]
    first, second = report.outcomes
    assert (first.start_ns, first.end_ns) == (0, 20 * SECOND)
    assert second.start_ns == first.end_ns


class KnobTracingSimulator(ClusterSimulator):
    """Records every node's knob for each stretch of simulated time."""

    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self.knobs = {node_id: [] for node_id in self.nodes}

    def _tick(self, t0, arrivals, tick_index):
        for node_id, node in self.nodes.items():
            self.knobs[node_id].append((self.tick_s, node.controller.knob))
        super()._tick(t0, arrivals, tick_index)

    def _fast_forward(self, t0, ticks):
        for node_id in self.nodes:
            self.knobs[node_id].append((ticks * self.tick_s, 1.0))
        super()._fast_forward(t0, ticks)


def test_capped_job_runtime_follows_its_knobs():
    config = small_run_config()
    workload = workload_of(*[make_job(f"job{i}", power_w=2000.0, runtime_s=100.0, walltime_s=400) for i in range(4)])
    sim = KnobTracingSimulator(config.cluster, config, 0, PowerModel(default_w_per_node=500.0))
    report = sim.run(workload)
    assert report.directives_issued > 0

    period_s = sim.period_ns / SECOND
    slowest = 0.0
    for outcome in report.outcomes:
        (node_id,) = sim.jobs[outcome.job_id].nodes
        assert outcome.start_ns == 0
        expected_s = dilated_runtime(sim.nodes[node_id].model, sim.knobs[node_id], 100.0)
        slowest = max(slowest, expected_s)
        assert abs(outcome.runtime_s - expected_s) <= period_s
        # accrued work, not the nominal figure
        assert 100.0 - 1e-6 <= outcome.work_done_s <= 100.0 + period_s
    assert slowest > 100.0
