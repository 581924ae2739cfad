#!/usr/bin/env python3
"""
Experiment runner

Orchestrates pretraining, adaptation, sweeps and report aggregation for one
resolved RunConfig, printing progress as it goes.
"""

import threading
import time
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from .baselines import TnpEdModel
from .checkpoint import checkpoint_name, load_checkpoint, save_checkpoint
from .config import RunConfig, worker_count
from .database import SweepLedger, cell_id
from .dataset_api import DatasetClient
from .errors import ConfigError, ExptError
from .evaluation import (GP_TASKS, ExptMethod, GradAscentMethod, TnpEdMethod, build_task_oracle,
                         make_few_shot, run_adaptation, run_sequential, selection_from_config, task_rng)
from .exporter import MetricsRow, ResultExporter, aggregate_metrics, emit_metrics, format_sweep_value
from .model import CheckpointSnapshot, ExPTModel, pretrain
from .nncore import DTYPES

MODEL_METHODS = {'expt': 'expt', 'tnp-ed': 'tnp-ed'}


@dataclass
class TrainedModel:
    """A model at one checkpoint step, ready for adaptation"""
    kind: str
    model: Any
    step: int
    path: Optional[Path] = None


def _stream(seed: int, *labels: str) -> np.random.Generator:
    """Named random stream derived from the run seed"""
    words = [seed] + [zlib.crc32(label.encode('utf-8')) for label in labels]
    return np.random.default_rng(np.random.SeedSequence(words))


def kernel_kind(task: str) -> str:
    if task in GP_TASKS:
        return GP_TASKS[task]
    return task.split(':', 1)[0]


def required_models(methods: Sequence[str]) -> List[str]:
    """Pretrained model kinds the given methods need, in method order"""
    kinds = []
    for method in methods:
        kind = MODEL_METHODS.get(method)
        if kind and kind not in kinds:
            kinds.append(kind)
    return kinds


class ExperimentRunner:
    """Runs the pretrain / adapt / sequential / sweep / report commands"""

    def __init__(self, config: RunConfig, quiet: bool = False, client: Optional[DatasetClient] = None,
                 metrics_path: Optional[Union[str, Path]] = None, workers: Optional[int] = None):
        """
        Initialize runner

        Args:
            config: resolved run configuration
            quiet: suppress progress output
            client: dataset client for table tasks and pools
            metrics_path: metrics CSV (default: <run dir>/metrics.csv)
            workers: worker pool size (default: run.workers capped by EXPT_THREADS)
        """
        self.config = config
        self.quiet = quiet
        self.client = client or DatasetClient()
        self.run_dir = config.output_dir / config.run_id
        self.metrics_path = Path(metrics_path) if metrics_path else self.run_dir / 'metrics.csv'
        self.workers = workers if workers is not None else worker_count(config)
        self.dtype = DTYPES[config['run.precision']]
        # (parameter, value) of the sweep arm this runner evaluates, empty outside sweeps
        self.sweep_arm: Tuple[str, str] = ('', '')
        self._stats_lock = threading.Lock()
        self.stats = {
            'checkpoints_written': 0,
            'evaluations': 0,
            'rows_appended': 0,
            'cells_skipped': 0,
            'failures': 0,
        }

    def log(self, message: str = ''):
        if not self.quiet:
            print(message)

    def _count(self, key: str, amount: int = 1):
        with self._stats_lock:
            self.stats[key] += amount

    @property
    def exporter(self) -> ResultExporter:
        return ResultExporter(self.run_dir, self.config.config_hash)

    def load_pool(self) -> Optional[np.ndarray]:
        source = self.config['generator.pool']
        if self.config['generator.input_source'] != 'pool':
            return None
        self.log(f"  Loading unlabeled pool: {source}")
        return self.client.load_pool(source)

    def build_model(self, kind: str):
        model_config = self.config.model_config()
        rng = _stream(self.config.seed, 'init', kind)
        if kind == 'expt':
            return ExPTModel(model_config, rng, dtype=self.dtype)
        if kind == 'tnp-ed':
            return TnpEdModel(model_config, rng, dtype=self.dtype)
        raise ConfigError(f"unknown model '{kind}'", key='train.models')

    # --- pretraining ----------------------------------------------------------

    def pretrain_models(self, kinds: Optional[Sequence[str]] = None,
                        keep_steps: Optional[Sequence[int]] = None) -> Dict[str, List[TrainedModel]]:
        """
        Pretrain each model kind, writing checkpoints and the loss curve

        Args:
            kinds: model kinds (default: train.models)
            keep_steps: checkpoint steps to keep in memory for evaluation
                        (default: only the final one)

        Returns:
            kind -> list of TrainedModel at the kept steps
        """
        kinds = list(self.config['train.models'] if kinds is None else kinds)
        train_config = self.config.pretrain_config(workers=self.workers)
        generator_config = self.config.generator_config()
        pool = self.load_pool()
        checkpoint_dir = self.run_dir / 'checkpoints'
        exporter = self.exporter
        trained: Dict[str, List[TrainedModel]] = {}

        for kind in kinds:
            self.log(f"  Pretraining {kind}: {train_config.iterations} iterations × "
                     f"{train_config.batch_functions} functions (seed {train_config.seed})")
            model = self.build_model(kind)
            self.log(f"    {model.num_parameters():,} parameters, {generator_config.family} "
                     f"generator, kernel {generator_config.kernel}")
            written: Dict[int, Path] = {}

            def save(snapshot: CheckpointSnapshot, kind=kind, model=model, written=written):
                path = checkpoint_dir / checkpoint_name(kind, snapshot.step, self.config.config_hash)
                save_checkpoint(model, snapshot.optimizer, path, parameters=snapshot.parameters, metadata={
                    'step': snapshot.step,
                    'seed': train_config.seed,
                    'config_hash': self.config.config_hash,
                    'generator_hash': self.config.generator_hash,
                })
                written[snapshot.step] = path
                self._count('checkpoints_written')
                self.log(f"    ✓ Checkpoint step {snapshot.step}: {path.name}")

            def progress(step: int, loss: float):
                if step == 1 or step % max(1, train_config.checkpoint_every // 10) == 0:
                    self.log(f"    step {step:>6}  loss {loss:.4f}")

            started = time.perf_counter()
            result = pretrain(train_config, generator_config, model, rng=_stream(train_config.seed, 'train', kind),
                              pool=pool, on_checkpoint=save, on_step=progress)
            loss_path = exporter.write_training_loss(kind, result.losses)
            self.log(f"    ✓ {kind} done in {time.perf_counter() - started:.1f}s, "
                     f"{result.functions_seen:,} functions seen; loss curve {loss_path.name}")

            final = max(s.step for s in result.checkpoints)
            wanted = set(keep_steps or []) | {final}
            models = []
            for snapshot in result.checkpoints:
                if snapshot.step not in wanted:
                    continue
                copy = self.build_model(kind)
                copy.load_state_dict(snapshot.parameters)
                copy.eval()
                models.append(TrainedModel(kind, copy, snapshot.step, written.get(snapshot.step)))
            trained[kind] = models
        return trained

    def run_pretrain(self) -> Dict[str, List[TrainedModel]]:
        self.log("=" * 80)
        self.log(f"Pretraining run {self.config.run_id} (config {self.config.short_hash})")
        self.log("=" * 80)
        self.log("\n[Step 1] Pretraining models...")
        trained = self.pretrain_models()
        self.print_summary("Pretraining Complete!")
        return trained

    # --- adaptation -----------------------------------------------------------

    def load_models(self, checkpoint_paths: Sequence[Union[str, Path]]) -> Dict[str, List[TrainedModel]]:
        models: Dict[str, List[TrainedModel]] = {}
        for path in checkpoint_paths:
            loaded = load_checkpoint(path)
            if loaded.model.config.d_x != self.config['generator.dimension']:
                raise ConfigError(f"{path} was trained with d={loaded.model.config.d_x}",
                                  key='generator.dimension')
            if loaded.metadata.get('generator_hash', self.config.generator_hash) != self.config.generator_hash:
                self.log(f"  ⚠️  {Path(path).name} was pretrained under a different generator config")
            models.setdefault(loaded.model.kind, []).append(
                TrainedModel(loaded.model.kind, loaded.model, loaded.step, Path(path)))
            self.log(f"  ✓ Loaded {loaded.model.kind} checkpoint step {loaded.step}: {Path(path).name}")
        return models

    def _method(self, name: str, trained: Optional[TrainedModel]):
        eval_config = self.config.eval_config()
        if name == 'expt':
            return ExptMethod(trained.model, eval_config.match_scale)
        if name == 'tnp-ed':
            return TnpEdMethod(trained.model, eval_config.ascent_steps, eval_config.tnp_ed_step_size)
        return GradAscentMethod(name, self.config.ensemble_config(name), eval_config.ascent_steps,
                                eval_config.ascent_step_size, verbose=not self.quiet)

    def evaluate(self, models: Dict[str, List[TrainedModel]], tasks: Optional[Sequence[str]] = None,
                 methods: Optional[Sequence[str]] = None, mode: Optional[str] = None) -> List[MetricsRow]:
        """
        Adapt every method to every task and score the proposals

        Few-shot data and the held-out function depend only on (task, seed),
        so every method faces the same problem.

        Returns:
            Metrics rows, also appended to the metrics CSV
        """
        eval_config = self.config.eval_config()
        tasks = list(tasks or eval_config.tasks)
        methods = list(methods or eval_config.methods)
        mode = mode or eval_config.mode
        seed = self.config.seed
        d = self.config['generator.dimension']
        for method in methods:
            kind = MODEL_METHODS.get(method)
            if kind and not models.get(kind):
                raise ConfigError(f"method '{method}' needs a pretrained {kind} checkpoint", key='eval.methods')

        exporter = self.exporter
        rows: List[MetricsRow] = []
        for task in tasks:
            oracle = build_task_oracle(task, eval_config, d, seed, self.client)
            few_shot = make_few_shot(oracle.reference_x, oracle.reference_y, selection_from_config(eval_config),
                                     task_rng(f"{task}:few-shot", seed), source_id=task, seed=seed)
            self.log(f"  Task {task}: {few_shot.n} few-shot points ({few_shot.selection}), y* = {oracle.y_star:.4f}")

            for method in methods:
                kind = MODEL_METHODS.get(method)
                for trained in (models[kind] if kind else [None]):
                    step = trained.step if trained else 0
                    oracle.calls = 0
                    provenance = dict(seed=seed, checkpoint_step=step, config_hash=self.config.config_hash,
                                      task=task)
                    rng = _stream(seed, 'adapt', task, method, str(step))
                    adapter = self._method(method, trained)
                    if mode == 'sequential':
                        report = run_sequential(few_shot, oracle, eval_config.q, adapter, rng, **provenance)
                    else:
                        report = run_adaptation(adapter, few_shot, oracle, eval_config.q, rng, **provenance)
                    self._count('evaluations')
                    exporter.write_report(report, extra={'run_id': self.config.run_id,
                                                         'few_shot_selection': few_shot.selection,
                                                         'oracle_calls': oracle.calls})
                    row = MetricsRow.from_report(report, self.config.run_id, kernel_kind(task),
                                                 self.config.generator_hash, self.sweep_arm)
                    rows.append(row)
                    self.log(f"    ✓ {method:<9} step {step:>6}  median {report.median:.3f}  "
                             f"max {report.max:.3f}  mean {report.mean:.3f}  "
                             f"(few-shot best {report.few_shot_best_norm:.3f}, {report.wall_time_s:.1f}s)")

        if rows:
            emit_metrics(rows, self.metrics_path)
            self._count('rows_appended', len(rows))
        return rows

    def run_adapt(self, checkpoint_paths: Sequence[Union[str, Path]], tasks: Optional[Sequence[str]] = None,
                  methods: Optional[Sequence[str]] = None, mode: Optional[str] = None) -> List[MetricsRow]:
        self.log("=" * 80)
        self.log(f"Adaptation run {self.config.run_id} (config {self.config.short_hash})")
        self.log("=" * 80)
        self.log("\n[Step 1] Loading checkpoints...")
        models = self.load_models(checkpoint_paths)
        self.log(f"\n[Step 2] Evaluating ({mode or self.config['eval.mode']})...")
        rows = self.evaluate(models, tasks, methods, mode)
        self.log(f"\nMetrics appended to {self.metrics_path}")
        self.print_summary("Adaptation Complete!")
        return rows

    # --- sweeps ---------------------------------------------------------------

    def sweep_units(self) -> List[Tuple[Any, int]]:
        """(parameter value, seed) pairs; each pretrains once and evaluates its cells"""
        values = self.config['sweep.values'] if self.config['sweep.param'] else [None]
        return [(value, seed) for value in values for seed in self.config['sweep.seeds']]

    def _unit_config(self, value: Any, seed: int) -> RunConfig:
        overrides: Dict[str, Any] = {'run.seed': seed, 'run.run_id': ''}
        if self.config['sweep.param']:
            overrides[self.config['sweep.param']] = value
        return self.config.with_overrides(overrides)

    def _run_unit(self, ledger: SweepLedger, value: Any, seed: int) -> List[MetricsRow]:
        config = self._unit_config(value, seed)
        tasks = list(config['eval.tasks'])
        methods = list(config['eval.methods'])
        pending = [(task, method) for task in tasks for method in methods
                   if not ledger.is_completed(cell_id(value, seed, task, method))]
        skipped = len(tasks) * len(methods) - len(pending)
        if skipped:
            self._count('cells_skipped', skipped)
        if not pending:
            self.log(f"  ℹ️  Skipping completed unit value={value!r} seed={seed}")
            return []

        label = f"value={value!r} seed={seed}" if self.config['sweep.param'] else f"seed={seed}"
        unit = ExperimentRunner(config, quiet=self.quiet, client=self.client, metrics_path=self.metrics_path,
                                workers=1)
        unit.run_dir = self.run_dir / f"cell-{config.short_hash}"
        if self.config['sweep.param']:
            unit.sweep_arm = (self.config['sweep.param'], format_sweep_value(value))
        rows: List[MetricsRow] = []
        try:
            for task, method in pending:
                ledger.upsert_cell(cell_id(value, seed, task, method), seed, task, method, value, 'running')
            self.log(f"  [{label}] pretraining {', '.join(required_models(m for _, m in pending)) or 'nothing'}")
            trained = unit.pretrain_models(required_models([m for _, m in pending]),
                                           keep_steps=config['run.eval_checkpoints'])
            for task, method in pending:
                cell = cell_id(value, seed, task, method)
                try:
                    cell_rows = unit.evaluate(trained, [task], [method])
                except ExptError as exc:
                    ledger.upsert_cell(cell, seed, task, method, value, 'failed', error=str(exc))
                    self._count('failures')
                    self.log(f"  ✗ [{label}] {task}/{method}: {exc}")
                    raise
                ledger.upsert_cell(cell, seed, task, method, value, 'completed',
                                   metrics=[asdict(row) for row in cell_rows])
                rows.extend(cell_rows)
        except ExptError as exc:
            for task, method in pending:
                cell = cell_id(value, seed, task, method)
                record = ledger.get_cell(cell)
                if record and record['status'] == 'running':
                    ledger.upsert_cell(cell, seed, task, method, value, 'failed', error=str(exc))
                    self._count('failures')
            raise
        finally:
            for key in ('checkpoints_written', 'evaluations', 'rows_appended'):
                self._count(key, unit.stats[key])
        return rows

    def run_sweep(self, force: bool = False) -> List[MetricsRow]:
        """
        Run every (value, seed, task, method) cell on a bounded worker pool

        Completed cells recorded in the ledger are skipped. The first failure
        is re-raised once every unit has finished.
        """
        units = self.sweep_units()
        self.log("=" * 80)
        self.log(f"Sweep {self.config.run_id} (config {self.config.short_hash})")
        self.log("=" * 80)
        param = self.config['sweep.param'] or '(none)'
        self.log(f"Parameter: {param}; {len(units)} units × {len(self.config['eval.tasks'])} tasks × "
                 f"{len(self.config['eval.methods'])} methods on {self.workers} workers")

        self.run_dir.mkdir(parents=True, exist_ok=True)
        ledger = SweepLedger(self.run_dir / f"sweep-{self.config.short_hash}.sqlite", self.config.config_hash,
                             force=force)
        rows: List[MetricsRow] = []
        errors: List[BaseException] = []
        try:
            self.log("\n[Step 1] Running cells...")
            with ThreadPoolExecutor(max_workers=self.workers) as executor:
                futures = [executor.submit(self._run_unit, ledger, value, seed) for value, seed in units]
                for future in futures:
                    try:
                        rows.extend(future.result())
                    except ExptError as exc:
                        errors.append(exc)
            ledger_stats = ledger.get_statistics()
        finally:
            ledger.close()

        summary_path = self.exporter.write_summary('sweep-summary', {
            'run_id': self.config.run_id,
            'config_hash': self.config.config_hash,
            'sweep_param': self.config['sweep.param'],
            'sweep_values': self.config['sweep.values'],
            'seeds': self.config['sweep.seeds'],
            'ledger': ledger_stats,
            'stats': dict(self.stats),
            'errors': [str(exc) for exc in errors],
        })
        self.print_summary("Sweep Complete!")
        self.log(f"\nLedger: {ledger_stats['completed']}/{ledger_stats['total_cells']} cells completed, "
                 f"{ledger_stats['failed']} failed; summary {summary_path.name}")
        if errors:
            raise errors[0]
        return rows

    # --- reporting ------------------------------------------------------------

    def run_report(self, metrics_path: Optional[Union[str, Path]] = None, force: bool = False) -> pd.DataFrame:
        path = Path(metrics_path) if metrics_path else self.metrics_path
        table = aggregate_metrics(path, force=force)
        self.log("=" * 80)
        self.log(f"Results from {path} (mean ± std across seeds)")
        self.log("=" * 80)
        if table.empty:
            self.log("No rows.")
        else:
            self.log(table.to_string(index=False))
        return table

    def print_summary(self, title: str):
        self.log("\n" + "=" * 80)
        self.log(title)
        self.log("=" * 80)
        self.log(f"Checkpoints written: {self.stats['checkpoints_written']}")
        self.log(f"Evaluations run: {self.stats['evaluations']}")
        self.log(f"Metrics rows appended: {self.stats['rows_appended']}")
        if self.stats['cells_skipped']:
            self.log(f"Cells skipped (already completed): {self.stats['cells_skipped']}")
        self.log(f"Failures: {self.stats['failures']}")
