"""
Row validation for job-record (history) CSVs.

Checks each row before it becomes a JobRecord so that a bad history file
fails with the offending row instead of deep inside training.
"""

import re
import math
import logging
from dataclasses import dataclass
from typing import List, Optional

logger = logging.getLogger(__name__)

HISTORY_COLUMNS = [
    'job_id', 'user', 'app_tag', 'nodes_requested', 'walltime_req_s', 'submit_time_ns',
    'actual_runtime_s', 'mean_power_w', 'node_power_w',
]

MAX_ID_LENGTH = 128

# ids are used in bus topics, so they cannot hold level separators or wildcards
INVALID_ID_PATTERN = re.compile(r'[/+#\s|]')


@dataclass
class ValidationResult:
    """Result of validation check."""
    is_valid: bool
    errors: List[str]
    warnings: List[str]
    sanitized_data: Optional[dict] = None


class RecordValidator:
    """
    Validates and converts one history row.

    Features:
    - Required field validation
    - Integer/real parsing
    - Identifier checks (ids travel in bus topics)
    - Per-node power list consistency
    """

    def __init__(self, strict: bool = False):
        """
        Initialize validator.

        Args:
            strict: If True, treat warnings as errors
        """
        self.strict = strict

    def validate(self, row: dict) -> ValidationResult:
        """
        Validate a history row.

        Args:
            row: Dict keyed by HISTORY_COLUMNS (values as read from CSV)

        Returns:
            ValidationResult with is_valid, errors, warnings, and sanitized_data
        """
        errors = []
        warnings = []
        sanitized = {}

        for key in ('job_id', 'user'):
            value = (row.get(key) or '').strip()
            if not value:
                errors.append(f"Missing required field: {key}")
            elif len(value) > MAX_ID_LENGTH or INVALID_ID_PATTERN.search(value):
                errors.append(f"Invalid {key} '{value[:30]}'")
            sanitized[key] = value

        app_tag = (row.get('app_tag') or '').strip()
        if not app_tag:
            warnings.append("Missing app_tag, defaulting to 'unknown'")
            app_tag = 'unknown'
        elif INVALID_ID_PATTERN.search(app_tag):
            errors.append(f"Invalid app_tag '{app_tag[:30]}'")
        sanitized['app_tag'] = app_tag

        nodes = self._parse_int(row, 'nodes_requested', errors)
        if nodes is not None and nodes < 1:
            errors.append("nodes_requested must be >= 1")
        sanitized['nodes_requested'] = nodes

        walltime = self._parse_int(row, 'walltime_req_s', errors)
        if walltime is not None and walltime <= 0:
            errors.append("walltime_req_s must be > 0")
        sanitized['walltime_req_s'] = walltime

        sanitized['submit_time_ns'] = self._parse_int(row, 'submit_time_ns', errors)

        runtime = self._parse_float(row, 'actual_runtime_s', errors)
        if runtime is not None and runtime <= 0:
            warnings.append(f"Non-positive runtime {runtime}")
        sanitized['actual_runtime_s'] = runtime

        power = self._parse_float(row, 'mean_power_w', errors)
        if power is not None and power < 0:
            errors.append(f"Negative mean_power_w {power}")
        sanitized['mean_power_w'] = power

        node_power = ()
        raw = (row.get('node_power_w') or '').strip()
        if raw:
            try:
                node_power = tuple(float(v) for v in raw.split('|'))
            except ValueError:
                errors.append(f"Invalid node_power_w '{raw[:30]}'")
            else:
                if nodes is not None and len(node_power) != nodes:
                    warnings.append(f"node_power_w lists {len(node_power)} nodes, expected {nodes}")
                if any(v < 0 for v in node_power):
                    errors.append("Negative value in node_power_w")
        sanitized['node_power_w'] = node_power

        is_valid = len(errors) == 0
        if self.strict and warnings:
            is_valid = False

        return ValidationResult(
            is_valid=is_valid,
            errors=errors,
            warnings=warnings,
            sanitized_data=sanitized if is_valid else None,
        )

    def _parse_int(self, row: dict, key: str, errors: List[str]) -> Optional[int]:
        value = (row.get(key) or '').strip()
        if not value:
            errors.append(f"Missing required field: {key}")
            return None
        try:
            return int(value)
        except ValueError:
            errors.append(f"{key} is not an integer: '{value[:30]}'")
            return None

    def _parse_float(self, row: dict, key: str, errors: List[str]) -> Optional[float]:
        value = (row.get(key) or '').strip()
        if not value:
            errors.append(f"Missing required field: {key}")
            return None
        try:
            number = float(value)
        except ValueError:
            errors.append(f"{key} is not a number: '{value[:30]}'")
            return None
        if not math.isfinite(number):
            errors.append(f"{key} is not finite")
            return None
        return number
