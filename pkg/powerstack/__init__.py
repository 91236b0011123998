"""
powerstack: energy-aware HPC middleware on a simulated cluster.

This package provides:
- Cluster description and rack/system power checks
- Power telemetry with ADC quantisation, decimation and clock sync
- An in-process topic/subscriber bus with a line wire format
- Per-job energy accounting and a keyed-mean power predictor
- A power-capped dispatcher with EASY backfilling and reactive node capping
- A deterministic discrete-event simulator tying them together
"""

__version__ = '0.1.0'

from .cluster_model import ClusterSpec, NodeSpec, default_cluster_spec, load_cluster_spec, peak_power, validate
from .config import RunConfig, load_run_config
from .errors import PowerStackError
from .sim import ClusterSimulator, SimReport, run
from .workload import Workload, generate_workload, parse_swf

__all__ = [
    'ClusterSpec', 'NodeSpec', 'default_cluster_spec', 'load_cluster_spec', 'peak_power', 'validate',
    'RunConfig', 'load_run_config', 'PowerStackError',
    'ClusterSimulator', 'SimReport', 'run',
    'Workload', 'generate_workload', 'parse_swf',
]
