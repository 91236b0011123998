import io

import pytest

from powerstack.errors import HistoryFormatError, PredictorError
from powerstack.predictor import (
    TIER_DEFAULT, TIER_GLOBAL, TIER_USER, TIER_USER_APP, PowerModel, TierStat, evaluate, load_model, predict,
    read_history, save_model, train, write_history,
)
from powerstack.record_validator import HISTORY_COLUMNS, RecordValidator
from powerstack.workload import GeneratorParams, generate_workload

from .helpers import make_record, make_request

HISTORY = [
    make_record('j1', 'alice', 'lammps', nodes=2, mean_power_w=3000.0),
    make_record('j2', 'alice', 'lammps', nodes=1, mean_power_w=1700.0),
    make_record('j3', 'alice', 'gromacs', nodes=1, mean_power_w=900.0),
    make_record('j4', 'bob', 'wrf', nodes=4, mean_power_w=4000.0),
]


def test_tiers_fall_back_in_order():
    model = train(HISTORY, default_w_per_node=2000.0)
    assert predict(model, make_request(user='alice', app_tag='lammps')) == (1600.0, TIER_USER_APP)
    # per-node means: alice 1500, 1700, 900; bob 1000
    assert predict(model, make_request(user='alice', app_tag='namd')) == (4100.0 / 3, TIER_USER)
    assert predict(model, make_request(user='carol', app_tag='lammps')) == (1275.0, TIER_GLOBAL)
    empty = train([], default_w_per_node=2000.0)
    assert predict(empty, make_request(user='carol')) == (2000.0, TIER_DEFAULT)


def test_prediction_scales_with_nodes_and_margin():
    model = train(HISTORY, safety_margin=1.1)
    total, tier = predict(model, make_request(user='bob', app_tag='wrf', nodes=3))
    assert tier == TIER_USER_APP
    assert total == pytest.approx(1000.0 * 3 * 1.1)


def test_training_is_order_independent():
    a = train(HISTORY)
    b = train(list(reversed(HISTORY)))
    assert a == b


def test_unusable_records_are_skipped():
    bad = make_record('j9', 'dave', 'x', runtime_s=0.0)
    model = train(HISTORY + [bad])
    assert 'dave' not in model.tier2
    assert model.tier3.count == len(HISTORY)


def test_margin_below_one_rejected():
    with pytest.raises(PredictorError):
        PowerModel(safety_margin=0.9)


def test_evaluate_exact_model():
    model = train(HISTORY[3:])
    result = evaluate(model, HISTORY[3:])
    assert result.mape == pytest.approx(0.0)
    assert result.rmse == pytest.approx(0.0)
    assert result.per_tier_counts == {TIER_USER_APP: 1, TIER_USER: 0, TIER_GLOBAL: 0, TIER_DEFAULT: 0}


def test_evaluate_known_error():
    model = PowerModel(default_w_per_node=1100.0)
    test = [make_record('j1', mean_power_w=1000.0), make_record('j2', mean_power_w=1000.0)]
    result = evaluate(model, test)
    assert result.mape == pytest.approx(0.1)
    assert result.rmse == pytest.approx(100.0)
    assert result.n_records == 2


def test_evaluate_empty_set():
    with pytest.raises(PredictorError):
        evaluate(PowerModel(), [])


def test_model_csv_round_trip():
    model = train(HISTORY, default_w_per_node=1800.0, safety_margin=1.2)
    out = io.StringIO()
    save_model(model, out)
    assert load_model(io.StringIO(out.getvalue())) == model


def test_model_csv_bad_row():
    text = "tier,key,mean_w_per_node,count\nuser_app,nobar,10.0,1\n"
    with pytest.raises(HistoryFormatError) as exc:
        load_model(io.StringIO(text))
    assert exc.value.row == 2


def test_model_csv_bad_header():
    with pytest.raises(HistoryFormatError):
        load_model(io.StringIO("a,b\n"))


def test_history_csv_round_trip():
    out = io.StringIO()
    write_history(HISTORY, out)
    assert read_history(io.StringIO(out.getvalue())) == HISTORY


def test_history_missing_column():
    with pytest.raises(HistoryFormatError, match='missing columns'):
        read_history(io.StringIO("job_id,user\nj1,alice\n"))


def test_history_bad_row_number():
    out = io.StringIO()
    write_history(HISTORY[:2], out)
    lines = out.getvalue().splitlines()
    lines[2] = lines[2].replace('alice', 'al/ice')
    with pytest.raises(HistoryFormatError) as exc:
        read_history(io.StringIO('\n'.join(lines) + '\n'))
    assert exc.value.row == 3


def _row(**overrides):
    row = {
        'job_id': 'j1', 'user': 'alice', 'app_tag': 'lammps', 'nodes_requested': '2',
        'walltime_req_s': '600', 'submit_time_ns': '0', 'actual_runtime_s': '300.0',
        'mean_power_w': '2400.0', 'node_power_w': '1200.0|1200.0',
    }
    row.update(overrides)
    assert set(row) == set(HISTORY_COLUMNS)
    return row


def test_validator_accepts_good_row():
    result = RecordValidator().validate(_row())
    assert result.is_valid
    assert result.sanitized_data['node_power_w'] == (1200.0, 1200.0)
    assert result.sanitized_data['nodes_requested'] == 2


def test_validator_defaults_missing_app_tag():
    result = RecordValidator().validate(_row(app_tag=''))
    assert result.is_valid
    assert result.sanitized_data['app_tag'] == 'unknown'
    assert result.warnings


def test_strict_mode_fails_on_warnings():
    assert not RecordValidator(strict=True).validate(_row(node_power_w='1200.0')).is_valid
    assert RecordValidator().validate(_row(node_power_w='1200.0')).is_valid


@pytest.mark.parametrize('field, value', [
    ('job_id', ''),
    ('user', 'a b'),
    ('app_tag', 'x+y'),
    ('nodes_requested', '0'),
    ('walltime_req_s', 'soon'),
    ('mean_power_w', '-1'),
    ('mean_power_w', 'nan'),
    ('node_power_w', '1|x'),
])
def test_validator_rejects(field, value):
    result = RecordValidator().validate(_row(**{field: value}))
    assert not result.is_valid
    assert result.errors
    assert result.sanitized_data is None


def test_tier_stat_is_count_weighted_mean():
    model = train(HISTORY)
    assert model.tier1[('alice', 'lammps')] == TierStat(1600.0, 2)
    assert model.tier2['alice'] == TierStat((1500.0 + 1700.0 + 900.0) / 3, 3)


def test_keyed_workload_is_predicted_exactly():
    workload = generate_workload(300, GeneratorParams(n_users=4, n_apps=3, max_nodes=4), seed=2)
    records = [
        make_record(job.job_id, job.request.user, job.request.app_tag, job.request.nodes_requested,
                    mean_power_w=job.node_power_w * job.request.nodes_requested)
        for job in workload
    ]
    first_seen = {}
    for record in records:
        first_seen.setdefault((record.request.user, record.request.app_tag), record)
    model = train(list(first_seen.values()))
    result = evaluate(model, records)
    assert result.mape == 0.0
    assert result.per_tier_counts[TIER_USER_APP] == len(records)


def test_empty_model_predicts_node_tdp():
    assert predict(train([]), make_request(nodes=3)) == (6000.0, TIER_DEFAULT)
