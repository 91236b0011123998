"""
Per-job power prediction.

A keyed-mean model with a conservative fallback chain:
(user, app_tag) -> user -> all jobs -> node TDP default.
Predictions are per-node means scaled by node count and a safety margin.
"""

import csv
import math
import logging
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, NamedTuple, Optional, Sequence, TextIO, Tuple

import numpy as np

from .errors import HistoryFormatError, PredictorError, WorkloadError
from .record_validator import HISTORY_COLUMNS, RecordValidator

logger = logging.getLogger(__name__)

TIER_USER_APP = 'user_app'
TIER_USER = 'user'
TIER_GLOBAL = 'global'
TIER_DEFAULT = 'default'
TIERS = (TIER_USER_APP, TIER_USER, TIER_GLOBAL, TIER_DEFAULT)

DEFAULT_W_PER_NODE = 2000.0
MODEL_COLUMNS = ['tier', 'key', 'mean_w_per_node', 'count']


@dataclass(frozen=True)
class JobRequest:
    """What the scheduler knows at submission time."""
    job_id: str
    user: str
    app_tag: str
    nodes_requested: int
    walltime_req_s: int
    submit_time_ns: int

    def __post_init__(self):
        if not self.job_id or not self.user:
            raise WorkloadError(f"job '{self.job_id}': job_id and user are required")
        if self.nodes_requested < 1:
            raise WorkloadError(f"job {self.job_id}: nodes_requested must be >= 1")
        if self.walltime_req_s <= 0:
            raise WorkloadError(f"job {self.job_id}: walltime_req_s must be > 0")


@dataclass(frozen=True)
class JobRecord:
    """A completed job: its request plus what was measured."""
    request: JobRequest
    actual_runtime_s: float
    mean_power_w: float  # whole allocation
    node_power_w: Tuple[float, ...] = ()

    @property
    def per_node_w(self) -> float:
        return self.mean_power_w / self.request.nodes_requested


class TierStat(NamedTuple):
    mean_w: float
    count: int


class Prediction(NamedTuple):
    total_w: float
    tier: str


@dataclass(frozen=True)
class PowerModel:
    tier1: Dict[Tuple[str, str], TierStat] = field(default_factory=dict)
    tier2: Dict[str, TierStat] = field(default_factory=dict)
    tier3: Optional[TierStat] = None
    default_w_per_node: float = DEFAULT_W_PER_NODE
    safety_margin: float = 1.0

    def __post_init__(self):
        if self.safety_margin < 1.0:
            raise PredictorError(f"safety_margin must be >= 1, got {self.safety_margin}")
        if self.default_w_per_node < 0:
            raise PredictorError("default_w_per_node must be >= 0")

    def per_node(self, user: str, app_tag: str) -> Tuple[float, str]:
        stat = self.tier1.get((user, app_tag))
        if stat is not None:
            return stat.mean_w, TIER_USER_APP
        stat = self.tier2.get(user)
        if stat is not None:
            return stat.mean_w, TIER_USER
        if self.tier3 is not None:
            return self.tier3.mean_w, TIER_GLOBAL
        return self.default_w_per_node, TIER_DEFAULT


def _stat(values: List[float]) -> TierStat:
    # fsum is correctly rounded, so the mean does not depend on record order
    return TierStat(math.fsum(values) / len(values), len(values))


def train(
    history: Iterable[JobRecord],
    default_w_per_node: float = DEFAULT_W_PER_NODE,
    safety_margin: float = 1.0,
) -> PowerModel:
    """Count-weighted per-node means for every tier. Unusable records are skipped."""
    by_key: Dict[Tuple[str, str], List[float]] = defaultdict(list)
    by_user: Dict[str, List[float]] = defaultdict(list)
    everything: List[float] = []
    skipped = 0

    for record in history:
        req = record.request
        if record.actual_runtime_s <= 0:
            logger.warning(f"Skipping job {req.job_id}: non-positive runtime {record.actual_runtime_s}")
            skipped += 1
            continue
        if record.mean_power_w < 0:
            logger.warning(f"Skipping job {req.job_id}: negative power {record.mean_power_w}")
            skipped += 1
            continue
        value = record.per_node_w
        by_key[(req.user, req.app_tag)].append(value)
        by_user[req.user].append(value)
        everything.append(value)

    model = PowerModel(
        tier1={key: _stat(values) for key, values in by_key.items()},
        tier2={user: _stat(values) for user, values in by_user.items()},
        tier3=_stat(everything) if everything else None,
        default_w_per_node=default_w_per_node,
        safety_margin=safety_margin,
    )
    logger.info(
        f"Trained on {len(everything)} records ({skipped} skipped): "
        f"{len(model.tier1)} user/app keys, {len(model.tier2)} users"
    )
    return model


def predict(model: PowerModel, req: JobRequest) -> Prediction:
    """Predicted mean power of the whole allocation, and the tier that supplied it."""
    per_node, tier = model.per_node(req.user, req.app_tag)
    return Prediction(per_node * req.nodes_requested * model.safety_margin, tier)


@dataclass
class EvaluationResult:
    mape: float
    rmse: float
    per_tier_counts: Dict[str, int]
    n_records: int


def evaluate(model: PowerModel, test: Sequence[JobRecord]) -> EvaluationResult:
    """MAPE (fraction) and RMSE (watts) of whole-allocation predictions."""
    from sklearn.metrics import mean_absolute_percentage_error, mean_squared_error

    if not test:
        raise PredictorError("empty test set")
    actual = []
    predicted = []
    tiers: Counter = Counter()
    for record in test:
        if record.mean_power_w <= 0:
            raise PredictorError(f"job {record.request.job_id}: MAPE needs positive measured power")
        prediction = predict(model, record.request)
        actual.append(record.mean_power_w)
        predicted.append(prediction.total_w)
        tiers[prediction.tier] += 1

    y_true = np.asarray(actual)
    y_pred = np.asarray(predicted)
    return EvaluationResult(
        mape=float(mean_absolute_percentage_error(y_true, y_pred)),
        rmse=float(np.sqrt(mean_squared_error(y_true, y_pred))),
        per_tier_counts={tier: tiers.get(tier, 0) for tier in TIERS},
        n_records=len(test),
    )


def save_model(model: PowerModel, out: TextIO):
    """CSV of tier,key,mean_w_per_node,count; meta rows carry default and margin."""
    writer = csv.writer(out, lineterminator='\n')
    writer.writerow(MODEL_COLUMNS)
    writer.writerow(['meta', 'default_w_per_node', repr(float(model.default_w_per_node)), 0])
    writer.writerow(['meta', 'safety_margin', repr(float(model.safety_margin)), 0])
    for (user, app), stat in sorted(model.tier1.items()):
        writer.writerow([TIER_USER_APP, f"{user}|{app}", repr(stat.mean_w), stat.count])
    for user, stat in sorted(model.tier2.items()):
        writer.writerow([TIER_USER, user, repr(stat.mean_w), stat.count])
    if model.tier3 is not None:
        writer.writerow([TIER_GLOBAL, '*', repr(model.tier3.mean_w), model.tier3.count])


def load_model(src: TextIO) -> PowerModel:
    """
    Inverse of save_model.

    Raises:
        HistoryFormatError with the offending row number
    """
    reader = csv.reader(src)
    header = next(reader, None)
    if header != MODEL_COLUMNS:
        raise HistoryFormatError(f"expected header {','.join(MODEL_COLUMNS)}", 1)

    tier1, tier2 = {}, {}
    tier3 = None
    meta = {'default_w_per_node': DEFAULT_W_PER_NODE, 'safety_margin': 1.0}
    for row_number, row in enumerate(reader, start=2):
        if len(row) != 4:
            raise HistoryFormatError(f"expected 4 fields, got {len(row)}", row_number)
        tier, key, mean_text, count_text = row
        try:
            mean_w = float(mean_text)
            count = int(count_text)
        except ValueError:
            raise HistoryFormatError("mean_w_per_node/count not numeric", row_number)
        if tier == 'meta':
            if key not in meta:
                raise HistoryFormatError(f"unknown meta key '{key}'", row_number)
            meta[key] = mean_w
            continue
        if count < 1 or mean_w < 0 or not math.isfinite(mean_w):
            raise HistoryFormatError("tier entries need count >= 1 and mean >= 0", row_number)
        if tier == TIER_USER_APP:
            user, sep, app = key.partition('|')
            if not sep or not user or not app:
                raise HistoryFormatError(f"user_app key must be 'user|app', got '{key}'", row_number)
            tier1[(user, app)] = TierStat(mean_w, count)
        elif tier == TIER_USER:
            tier2[key] = TierStat(mean_w, count)
        elif tier == TIER_GLOBAL:
            tier3 = TierStat(mean_w, count)
        else:
            raise HistoryFormatError(f"unknown tier '{tier}'", row_number)

    try:
        return PowerModel(tier1, tier2, tier3, meta['default_w_per_node'], meta['safety_margin'])
    except PredictorError as e:
        raise HistoryFormatError(str(e))


def read_history(src: TextIO, strict: bool = False) -> List[JobRecord]:
    """
    Parse a job-record CSV.

    Raises:
        HistoryFormatError: missing columns or an invalid row (row 1 is the header)
    """
    reader = csv.DictReader(src)
    missing = [c for c in HISTORY_COLUMNS if c not in (reader.fieldnames or [])]
    if missing:
        raise HistoryFormatError(f"missing columns: {', '.join(missing)}", 1)

    validator = RecordValidator(strict=strict)
    records = []
    for row_number, row in enumerate(reader, start=2):
        result = validator.validate(row)
        for warning in result.warnings:
            logger.warning(f"row {row_number}: {warning}")
        if not result.is_valid:
            raise HistoryFormatError('; '.join(result.errors or result.warnings), row_number)
        data = result.sanitized_data
        request = JobRequest(
            job_id=data['job_id'],
            user=data['user'],
            app_tag=data['app_tag'],
            nodes_requested=data['nodes_requested'],
            walltime_req_s=data['walltime_req_s'],
            submit_time_ns=data['submit_time_ns'],
        )
        records.append(JobRecord(request, data['actual_runtime_s'], data['mean_power_w'], data['node_power_w']))
    return records


def write_history(records: Iterable[JobRecord], out: TextIO):
    writer = csv.writer(out, lineterminator='\n')
    writer.writerow(HISTORY_COLUMNS)
    for record in records:
        req = record.request
        writer.writerow([
            req.job_id, req.user, req.app_tag, req.nodes_requested, req.walltime_req_s,
            req.submit_time_ns, repr(float(record.actual_runtime_s)), repr(float(record.mean_power_w)),
            '|'.join(repr(float(w)) for w in record.node_power_w),
        ])
