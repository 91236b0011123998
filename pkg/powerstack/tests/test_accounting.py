import io

import pytest

from powerstack.accounting import (
    AllocationWindow, RunRecord, SystemPowerMeter, close_ledger, integrate, integrate_units, job_energy,
    publish_job_energy, snap_window, write_ledger_csv,
)
from powerstack.bus import MessageBus, encode_sample, sample_topic
from powerstack.errors import AccountingError
from powerstack.telemetry import PowerSample, PowerStream

PERIOD = 20_000
SECOND = 1_000_000_000
SAMPLES_PER_SECOND = SECOND // PERIOD


def _stream(*runs):
    """Runs of (start_ns, watts, samples)."""
    stream = PowerStream(PERIOD)
    for start, watts, count in runs:
        stream.append_run(start, int(watts * 1_000_000), count)
    return stream


def _samples(*watts, start=0):
    return [PowerSample('n1', 'node', start + k * PERIOD, int(w * 1_000_000)) for k, w in enumerate(watts)]


def test_constant_stream_energy():
    stream = _stream((0, 2000, 100 * SAMPLES_PER_SECOND))
    assert integrate(stream, 0, 100 * SECOND) == 200_000.0


def test_empty_window_is_zero():
    assert integrate_units(_stream((0, 5, 3)), 20_000, 20_000) == 0


def test_window_snaps_outward():
    assert snap_window(5_000, 45_000, PERIOD) == (0, 60_000)
    stream = _stream((0, 1, 3), (60_000, 2, 3))
    # [5000, 45000) widens to the first three samples
    assert integrate_units(stream, 5_000, 45_000) == 3_000_000


def test_sample_list_and_stream_agree():
    watts = [400, 400, 1800, 1800, 1800, 650]
    samples = _samples(*watts)
    stream = PowerStream(PERIOD)
    stream.append_array(0, [s.power_uw for s in samples])
    for lo, hi in [(0, 120_000), (20_000, 80_000), (40_000, 60_000)]:
        assert integrate_units(samples, lo, hi) == integrate_units(stream, lo, hi)


def test_additivity_over_split_windows():
    stream = _stream((0, 700, 10), (200_000, 1300, 15))
    whole = integrate_units(stream, 0, 500_000)
    assert whole == integrate_units(stream, 0, 180_000) + integrate_units(stream, 180_000, 500_000)


def test_gap_in_stream_raises():
    stream = _stream((0, 1, 2), (80_000, 1, 2))
    with pytest.raises(AccountingError, match='gap'):
        integrate_units(stream, 0, 120_000)


def test_gap_in_sample_list_raises():
    samples = _samples(1, 1) + _samples(1, start=80_000)
    with pytest.raises(AccountingError, match='gap'):
        integrate_units(samples, 0, 100_000)


def test_out_of_order_samples_raise():
    samples = list(reversed(_samples(1, 1)))
    with pytest.raises(AccountingError, match='out of order'):
        integrate_units(samples, 0, 40_000)


def test_window_beyond_stream_raises():
    stream = _stream((20_000, 1, 2))
    with pytest.raises(AccountingError):
        integrate_units(stream, 0, 40_000)
    with pytest.raises(AccountingError):
        integrate_units(stream, 20_000, 80_000)


def test_reversed_window_raises():
    with pytest.raises(AccountingError):
        integrate_units(_stream((0, 1, 2)), 40_000, 20_000)


def test_job_energy_sums_its_nodes():
    streams = {'n1': _stream((0, 1000, 50)), 'n2': _stream((0, 500, 50))}
    windows = [
        AllocationWindow('j1', 'n1', 0, 500_000),
        AllocationWindow('j1', 'n2', 0, 500_000),
        AllocationWindow('j2', 'n1', 500_000, 1_000_000),
    ]
    # 1500 W over 0.5 ms
    assert job_energy('j1', windows, streams) == pytest.approx(0.75)
    with pytest.raises(AccountingError):
        job_energy('j1', windows, {'n1': streams['n1']})


def test_allocation_window_must_be_non_empty():
    with pytest.raises(AccountingError):
        AllocationWindow('j1', 'n1', 10, 10)


def _run(allocations, streams=None, end_ns=SECOND):
    streams = streams or {
        'n1': _stream((0, 1000, SAMPLES_PER_SECOND)),
        'n2': _stream((0, 400, SAMPLES_PER_SECOND)),
    }
    users = {w.job_id: 'alice' if w.job_id == 'j1' else 'bob' for w in allocations}
    return RunRecord(0, end_ns, streams, allocations, users)


def test_ledger_conserves_energy():
    ledger = close_ledger(_run([
        AllocationWindow('j1', 'n1', 0, SECOND // 2),
        AllocationWindow('j2', 'n1', SECOND // 2, SECOND),
        AllocationWindow('j2', 'n2', 0, SECOND // 4),
    ]))
    assert ledger.total_j == pytest.approx(1400.0)
    assert ledger.per_job_j['j1'] == pytest.approx(500.0)
    assert ledger.per_job_j['j2'] == pytest.approx(600.0)
    assert ledger.idle_j == pytest.approx(300.0)
    assert ledger.per_user_j == {'alice': ledger.per_job_j['j1'], 'bob': ledger.per_job_j['j2']}
    assert ledger.conservation_error() <= 1e-9
    assert ledger.job_windows['j2'] == (0, SECOND, 2)


def test_ledger_records_snapped_windows():
    ledger = close_ledger(_run([AllocationWindow('j1', 'n1', PERIOD // 2, SECOND - PERIOD // 2)]))
    assert ledger.job_windows['j1'] == (0, SECOND, 1)
    assert ledger.per_job_j['j1'] == pytest.approx(1000.0)


def test_ledger_rejects_overlap():
    with pytest.raises(AccountingError, match='overlaps'):
        close_ledger(_run([
            AllocationWindow('j1', 'n1', 0, SECOND // 2),
            AllocationWindow('j2', 'n1', SECOND // 4, SECOND),
        ]))


def test_ledger_rejects_window_outside_run():
    with pytest.raises(AccountingError, match='outside the run'):
        close_ledger(_run([AllocationWindow('j1', 'n1', 0, 2 * SECOND)]))


def test_ledger_rejects_unknown_node():
    with pytest.raises(AccountingError, match='no power stream'):
        close_ledger(_run([AllocationWindow('j1', 'n9', 0, SECOND)]))


def test_empty_run_ledger():
    ledger = close_ledger(RunRecord(0, 0, {'n1': PowerStream(PERIOD)}, [], {}))
    assert ledger.total_j == 0.0
    assert ledger.idle_j == 0.0


def test_facility_energy_applies_psu_gain():
    ledger = close_ledger(_run([]))
    assert ledger.facility_energy_j() == pytest.approx(1400.0 * 0.95)


def test_ledger_csv_layout():
    ledger = close_ledger(_run([AllocationWindow('j1', 'n1', 0, SECOND // 2)]))
    out = io.StringIO()
    write_ledger_csv(ledger, out)
    rows = out.getvalue().splitlines()
    assert rows[0] == 'job_id,user,nodes,start_s,end_s,energy_j,avg_power_w'
    assert rows[1] == 'j1,alice,1,0.000000,0.500000,500.000000,1000.000'
    assert rows[2].startswith('#IDLE,,,0.000000,1.000000,900.000000')
    assert rows[3] == '#TOTAL,,,0.000000,1.000000,1400.000000,1400.000'


def test_publish_job_energy():
    ledger = close_ledger(_run([AllocationWindow('j1', 'n1', 0, SECOND // 2)]))
    bus = MessageBus()
    sub = bus.subscribe('davide/jobs/+/energy')
    assert publish_job_energy(bus, ledger) == 1
    envelope = sub.drain()[0]
    assert envelope.topic == 'davide/jobs/j1/energy'
    assert envelope.payload == b'500000000;500.000000\n'


def test_system_meter_keeps_latest_per_node():
    bus = MessageBus()
    meter = SystemPowerMeter(bus)
    for node, watts in [('n1', 1000), ('n2', 400), ('n1', 1200)]:
        sample = PowerSample(node, 'node', 0, watts * 1_000_000)
        bus.publish(sample_topic('davide', 'r1', node, 'node'), encode_sample(sample))
    bus.publish(sample_topic('davide', 'r1', 'n1', 'gpu0'), b'0;5\n')
    assert meter.node_power_w('n1') == 1200.0
    assert meter.node_power_w('n3') is None
    assert meter.system_power_w() == 1600.0
    assert meter.received == 3
