"""
Command-line front end.

Usage:
    python -m powerstack validate --config config/cluster.ini
    python -m powerstack simulate --config config/cluster.ini --synthetic-jobs 200 --seed 7 --out runs/a
    python -m powerstack simulate --config config/cluster.ini --workload data/sample.swf --seed 1 --out runs/b
    python -m powerstack simulate --manifest runs/a/manifest --out runs/a2
    python -m powerstack simulate ... --sweep-cap 60000 --sweep-cap 80000 --out runs/sweep
    python -m powerstack train --history runs/a/history.csv --model model.csv
    python -m powerstack evaluate --model model.csv --test runs/b/history.csv
    python -m powerstack replay --run-dir runs/a --port 9000
    python -m powerstack report runs/a

Exit codes: 0 success, 1 domain violation, 2 input or parse error.
"""

import sys
import shutil
import logging
import argparse
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional, Sequence

from .cluster_model import load_cluster_spec, validate
from .config import RunConfig, load_run_config
from .errors import INPUT_ERRORS, PowerStackError
from .logging_config import RunLogContext, setup_logging
from .predictor import evaluate, load_model, read_history, save_model, train, DEFAULT_W_PER_NODE
from .rate_limiter import PacingConfig, TokenBucket
from .replay import ReplayServer, read_telemetry_log
from .reporting import (
    ARTIFACT_VERSION, MANIFEST, SUMMARY_CSV, TELEMETRY_LOG, RunManifest, read_manifest, read_summary_csv,
    sha256_file, summarize, summary_line, write_run,
)
from .sim import run
from .workload import GeneratorParams, Workload, generate_workload, parse_swf

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_DOMAIN = 1
EXIT_INPUT = 2

ARTIFACTS = (
    'jobs.csv', 'timeline.csv', 'decisions.csv', 'ledger.csv', 'history.csv', SUMMARY_CSV,
    TELEMETRY_LOG, MANIFEST,
)


class InputFileError(PowerStackError):
    """An input file is missing or unreadable."""


def _read_text(path: str) -> str:
    try:
        return Path(path).read_text(encoding='utf-8')
    except OSError as e:
        raise InputFileError(f"cannot read {path}: {e.strerror or e}")


def _cap_label(watts: float) -> str:
    return str(int(watts)) if float(watts).is_integer() else repr(float(watts))


# -- simulate --------------------------------------------------------------

@dataclass(frozen=True)
class SimulationJob:
    """One simulation to run; picklable so sweeps can ship it to worker processes."""
    config_path: str
    seed: int
    out_dir: str
    workload_path: str = ''
    synthetic_jobs: int = -1
    oracle_predictor: bool = False
    backfill: bool = True
    reactive: bool = True
    system_cap_w: Optional[float] = None
    model_path: str = ''

    def manifest(self) -> RunManifest:
        synthetic = not self.workload_path
        return RunManifest(
            version=ARTIFACT_VERSION,
            config_path=self.config_path,
            config_sha256=sha256_file(Path(self.config_path)),
            workload=f"synthetic:{self.synthetic_jobs}" if synthetic else self.workload_path,
            workload_sha256='' if synthetic else sha256_file(Path(self.workload_path)),
            seed=self.seed,
            out_dir=self.out_dir,
            oracle_predictor=self.oracle_predictor,
            backfill=self.backfill,
            reactive=self.reactive,
            system_cap_w='' if self.system_cap_w is None else repr(float(self.system_cap_w)),
            model=self.model_path,
            model_sha256=sha256_file(Path(self.model_path)) if self.model_path else '',
        )

    @classmethod
    def from_manifest(cls, manifest: RunManifest, out_dir: Optional[str] = None) -> 'SimulationJob':
        synthetic = manifest.workload.startswith('synthetic:')
        return cls(
            config_path=manifest.config_path,
            seed=manifest.seed,
            out_dir=out_dir or manifest.out_dir,
            workload_path='' if synthetic else manifest.workload,
            synthetic_jobs=int(manifest.workload.split(':', 1)[1]) if synthetic else -1,
            oracle_predictor=manifest.oracle_predictor,
            backfill=manifest.backfill,
            reactive=manifest.reactive,
            system_cap_w=float(manifest.system_cap_w) if manifest.system_cap_w else None,
            model_path=manifest.model,
        )


def _power_range(config: RunConfig):
    nodes = config.cluster.nodes
    lo = config.workload.power_min_w
    hi = config.workload.power_max_w
    if lo is None:
        lo = min(n.idle_power for n in nodes) if nodes else 0.0
    if hi is None:
        hi = max(n.node_max_power for n in nodes) if nodes else 0.0
    return lo, hi


def load_workload(job: SimulationJob, config: RunConfig) -> Workload:
    lo, hi = _power_range(config)
    wc = config.workload
    if job.workload_path:
        return parse_swf(_read_text(job.workload_path), wc.cores_per_node, lo, hi, wc.phase_amplitude)
    params = GeneratorParams(
        max_nodes=max(1, min(GeneratorParams.max_nodes, len(config.cluster.nodes))),
        power_min_w=lo,
        power_max_w=hi,
        phase_amplitude=wc.phase_amplitude,
    )
    return generate_workload(job.synthetic_jobs, params, job.seed)


def run_simulation(job: SimulationJob) -> str:
    """Load inputs, simulate, write the run directory; returns the summary line."""
    config = load_run_config(_read_text(job.config_path))
    changes = {
        'oracle_predictor': job.oracle_predictor or config.scheduler.oracle_predictor,
        'backfill': job.backfill and config.scheduler.backfill,
        'reactive': job.reactive and config.scheduler.reactive,
    }
    if job.system_cap_w is not None:
        changes['system_cap_w'] = job.system_cap_w
    config = config.with_scheduler(**changes)
    model = None
    if job.model_path:
        with open(job.model_path, newline='', encoding='utf-8') as f:
            model = load_model(f)
        if model.safety_margin != config.scheduler.safety_margin:
            model = replace(model, safety_margin=config.scheduler.safety_margin)

    workload = load_workload(job, config)
    with RunLogContext('sim', f"simulation of {len(workload)} jobs (seed {job.seed})"):
        report = run(config.cluster, workload, config, job.seed, model)
    write_run(report, Path(job.out_dir), job.manifest())
    return summary_line(summarize(report))


def _remove_partial(out_dir: Path, created: bool):
    if created:
        shutil.rmtree(out_dir, ignore_errors=True)
        return
    for name in ARTIFACTS:
        (out_dir / name).unlink(missing_ok=True)


def _sweep_worker(job: SimulationJob) -> str:
    out_dir = Path(job.out_dir)
    created = not out_dir.exists()
    try:
        return run_simulation(job)
    except Exception:
        _remove_partial(out_dir, created)
        raise


def cmd_simulate(args) -> int:
    if args.manifest:
        manifest = read_manifest(Path(args.manifest))
        manifest.verify()
        base = SimulationJob.from_manifest(manifest, args.out)
    else:
        missing = [flag for flag, value in (('--config', args.config), ('--seed', args.seed), ('--out', args.out))
                   if value is None]
        if missing:
            raise InputFileError(f"simulate needs {', '.join(missing)} (or --manifest)")
        if bool(args.workload) == (args.synthetic_jobs is not None):
            raise InputFileError("give exactly one of --workload and --synthetic-jobs")
        if args.seed < 0:
            raise InputFileError("--seed must be >= 0")
        base = SimulationJob(
            config_path=str(Path(args.config).resolve()),
            seed=args.seed,
            out_dir=args.out,
            workload_path=str(Path(args.workload).resolve()) if args.workload else '',
            synthetic_jobs=args.synthetic_jobs if args.synthetic_jobs is not None else -1,
            oracle_predictor=args.oracle_predictor,
            backfill=not args.no_backfill,
            reactive=not args.no_reactive,
            model_path=str(Path(args.model).resolve()) if args.model else '',
        )

    out_dir = Path(base.out_dir)
    created = not out_dir.exists()
    out_dir.mkdir(parents=True, exist_ok=True)
    setup_logging(log_dir=out_dir / 'logs', run_name='simulate')
    try:
        if not args.sweep_cap:
            print(run_simulation(base))
            return EXIT_OK
        jobs = [
            replace(base, out_dir=str(out_dir / f"cap_{_cap_label(cap)}"), system_cap_w=cap)
            for cap in args.sweep_cap
        ]
        with ProcessPoolExecutor(max_workers=args.workers) as pool:
            for job, line in zip(jobs, pool.map(_sweep_worker, jobs)):
                print(f"{Path(job.out_dir).name} {line}")
        return EXIT_OK
    except BaseException:
        setup_logging(level=logging.getLogger().level)
        _remove_partial(out_dir, created)
        raise
    finally:
        setup_logging(level=logging.getLogger().level)


# -- other commands --------------------------------------------------------

def cmd_validate(args) -> int:
    spec = load_cluster_spec(_read_text(args.config))
    problems = validate(spec)
    for problem in problems:
        print(problem)
    if problems:
        return EXIT_DOMAIN
    print(f"ok: {len(spec.nodes)} nodes, {len(spec.racks)} racks")
    return EXIT_OK


def cmd_train(args) -> int:
    with open(args.history, newline='', encoding='utf-8') as f:
        history = read_history(f)
    with RunLogContext('predictor', f"training on {len(history)} records"):
        model = train(history, args.default_w_per_node, args.safety_margin)
    if model.tier3 is None:
        logger.warning("No usable history: the model has the default tier only")
    with open(args.model, 'w', newline='', encoding='utf-8') as f:
        save_model(model, f)
    print(f"model: {len(model.tier1)} user/app keys, {len(model.tier2)} users -> {args.model}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    with open(args.model, newline='', encoding='utf-8') as f:
        model = load_model(f)
    with open(args.test, newline='', encoding='utf-8') as f:
        test = read_history(f)
    result = evaluate(model, test)
    tiers = ' '.join(f"{tier}={count}" for tier, count in result.per_tier_counts.items())
    print(f"records={result.n_records} mape={result.mape:.6f} rmse={result.rmse:.3f} {tiers}")
    return EXIT_OK


def cmd_replay(args) -> int:
    log_path = Path(args.run_dir) / TELEMETRY_LOG
    if not log_path.is_file():
        raise InputFileError(f"{log_path} does not exist")
    lines = read_telemetry_log(log_path)
    pacer = TokenBucket.from_config(PacingConfig(args.rate, args.burst)) if args.rate else None
    server = ReplayServer(lines, args.host, args.port, args.clients, pacer)
    with RunLogContext('replay', f"replay of {len(lines)} lines"):
        if lines:
            server.bind()
            print(f"listening on {server.host}:{server.port}", flush=True)
        server.serve()
    return EXIT_OK


def cmd_report(args) -> int:
    path = Path(args.run_dir) / SUMMARY_CSV
    if not path.is_file():
        raise InputFileError(f"{path} does not exist")
    summary = read_summary_csv(path)
    print(summary_line(summary))
    for key, value in summary.items():
        print(f"  {key}: {value}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog='powerstack', description='Energy-aware HPC middleware simulator')
    parser.add_argument('--verbose', action='store_true', help='Debug logging')
    commands = parser.add_subparsers(dest='command', required=True)

    p = commands.add_parser('validate', help='Check a cluster config against rack caps')
    p.add_argument('--config', required=True)
    p.set_defaults(func=cmd_validate)

    p = commands.add_parser('simulate', help='Run one simulation (or a cap sweep)')
    p.add_argument('--config')
    p.add_argument('--workload', help='SWF trace')
    p.add_argument('--synthetic-jobs', type=int, help='Generate this many jobs instead of reading a trace')
    p.add_argument('--seed', type=int)
    p.add_argument('--out', help='Run directory')
    p.add_argument('--model', help='Trained power model CSV')
    p.add_argument('--oracle-predictor', action='store_true', help='Predict each job with its true power')
    p.add_argument('--no-backfill', action='store_true')
    p.add_argument('--no-reactive', action='store_true')
    p.add_argument('--manifest', help='Re-run a recorded manifest')
    p.add_argument('--sweep-cap', type=float, action='append', metavar='W', help='System cap to sweep (repeatable)')
    p.add_argument('--workers', type=int, default=None, help='Sweep worker processes')
    p.set_defaults(func=cmd_simulate)

    p = commands.add_parser('train', help='Train a power model from job records')
    p.add_argument('--history', required=True)
    p.add_argument('--model', required=True, help='Output model CSV')
    p.add_argument('--default-w-per-node', type=float, default=DEFAULT_W_PER_NODE)
    p.add_argument('--safety-margin', type=float, default=1.0)
    p.set_defaults(func=cmd_train)

    p = commands.add_parser('evaluate', help='Score a model on held-out job records')
    p.add_argument('--model', required=True)
    p.add_argument('--test', required=True)
    p.set_defaults(func=cmd_evaluate)

    p = commands.add_parser('replay', help='Serve a run\'s telemetry log over TCP')
    p.add_argument('--run-dir', required=True)
    p.add_argument('--port', type=int, required=True)
    p.add_argument('--host', default='127.0.0.1')
    p.add_argument('--clients', type=int, default=1)
    p.add_argument('--rate', type=float, default=0.0, help='Lines per second (0: unpaced)')
    p.add_argument('--burst', type=float, default=100.0)
    p.set_defaults(func=cmd_replay)

    p = commands.add_parser('report', help='Print the summary of a run directory')
    p.add_argument('run_dir')
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    setup_logging(level=logging.DEBUG if args.verbose else logging.INFO)
    try:
        return args.func(args)
    except (InputFileError, *INPUT_ERRORS) as e:
        logger.error(str(e))
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INPUT
    except PowerStackError as e:
        logger.error(str(e))
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DOMAIN
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INPUT
