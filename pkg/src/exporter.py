#!/usr/bin/env python3
"""
Result exporter

Writes evaluation reports as JSON, training-loss curves and the metrics CSV,
and aggregates metrics rows into mean ± std tables across seeds.
"""

import json
import math
import os
import re
import threading
from dataclasses import asdict, dataclass, fields
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, Iterable, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from .errors import InputValidationError, PersistenceError
from .evaluation import EvalReport


@dataclass
class MetricsRow:
    """One (task, seed, checkpoint) evaluation; column order is the field order"""
    run_id: str
    task: str
    kernel_kind: str
    seed: int
    checkpoint_step: int
    q: int
    score_median: float
    score_max: float
    score_mean: float
    few_shot_best: float
    wall_time_s: float
    method: str = 'expt'
    mode: str = 'simultaneous'
    config_hash: str = ''
    generator_hash: str = ''
    sweep_param: str = ''
    sweep_value: str = ''

    @classmethod
    def from_report(cls, report: EvalReport, run_id: str, kernel_kind: str, generator_hash: str = '',
                    sweep_arm: Tuple[str, str] = ('', '')) -> 'MetricsRow':
        return cls(run_id=run_id, task=report.task, kernel_kind=kernel_kind, seed=int(report.seed or 0),
                   checkpoint_step=int(report.checkpoint_step or 0), q=report.q, score_median=report.median,
                   score_max=report.max, score_mean=report.mean, few_shot_best=report.few_shot_best_norm,
                   wall_time_s=report.wall_time_s, method=report.method, mode=report.mode,
                   config_hash=report.config_hash, generator_hash=generator_hash,
                   sweep_param=sweep_arm[0], sweep_value=sweep_arm[1])


def format_sweep_value(value: Any) -> str:
    """Stable text form of a sweep parameter value (JSON for non-strings)"""
    if value is None:
        return ''
    return value if isinstance(value, str) else json.dumps(value)


METRICS_COLUMNS = [f.name for f in fields(MetricsRow)]
NUMERIC_COLUMNS = ('score_median', 'score_max', 'score_mean', 'few_shot_best', 'wall_time_s')
SUMMARY_COLUMNS = ('score_median', 'score_max', 'score_mean', 'few_shot_best')

_metrics_lock = threading.Lock()


def emit_metrics(rows: Sequence[MetricsRow], path: Union[str, Path]) -> Path:
    """
    Append rows to the metrics CSV (header written once)

    The file is rewritten through a temporary file and an atomic rename, so
    readers never see a partial row.
    """
    path = Path(path)
    for row in rows:
        for column in NUMERIC_COLUMNS:
            if not math.isfinite(getattr(row, column)):
                raise InputValidationError(f"metrics row for {row.task}/{row.method} has non-finite {column}")
    frame = pd.DataFrame([asdict(row) for row in rows], columns=METRICS_COLUMNS)

    with _metrics_lock:
        try:
            existing = path.read_bytes() if path.exists() else b''
            if existing:
                header = existing.split(b'\n', 1)[0].decode('utf-8').strip()
                if header != ','.join(METRICS_COLUMNS):
                    raise PersistenceError(f"{path}: existing header does not match the metrics columns")
            text = frame.to_csv(index=False, header=not existing, lineterminator='\n')
            path.parent.mkdir(parents=True, exist_ok=True)
            partial = path.with_name(path.name + '.tmp')
            partial.write_bytes(existing + text.encode('utf-8'))
            os.replace(partial, path)
        except OSError as exc:
            raise PersistenceError(f"cannot append metrics to {path}: {exc}") from exc
    return path


def format_mean_std(values: Iterable[float]) -> str:
    """'mean ± population std' with three decimals"""
    values = np.asarray(list(values), dtype=np.float64)
    return f"{values.mean():.3f} ± {values.std(ddof=0):.3f}"


def aggregate_metrics(path: Union[str, Path], force: bool = False) -> pd.DataFrame:
    """
    Mean ± std across seeds per (sweep arm, task, method, mode, checkpoint)

    Rows from different sweep arms are never averaged together. Within one
    group every row must come from the same generator config.

    Args:
        path: metrics CSV
        force: aggregate even when a group mixes generator configs

    Returns:
        DataFrame with one formatted row per group; the sweep columns are
        dropped when no row belongs to a sweep arm
    """
    path = Path(path)
    if not path.exists():
        raise PersistenceError(f"metrics file not found: {path}")
    text_columns = ('generator_hash', 'config_hash', 'sweep_param', 'sweep_value')
    frame = pd.read_csv(path, dtype={column: str for column in text_columns})
    if frame.empty:
        return pd.DataFrame(columns=['task', 'method', 'mode', 'checkpoint_step', 'seeds', *SUMMARY_COLUMNS])
    for column in text_columns:
        frame[column] = frame[column].fillna('')

    keys = ['sweep_param', 'sweep_value', 'task', 'method', 'mode', 'checkpoint_step']
    table = []
    for group, rows in frame.groupby(keys, sort=True):
        entry = dict(zip(keys, group))
        hashes = sorted(rows['generator_hash'].unique())
        if len(hashes) > 1 and not force:
            raise InputValidationError(
                f"{path}: {entry['task']}/{entry['method']} rows come from {len(hashes)} generator configs "
                f"({', '.join(h[:8] for h in hashes)}); pass --force to aggregate anyway")
        entry['seeds'] = int(rows['seed'].nunique())
        for column in SUMMARY_COLUMNS:
            entry[column] = format_mean_std(rows[column])
        table.append(entry)
    table = pd.DataFrame(table)
    if not (table['sweep_param'] != '').any():
        table = table.drop(columns=['sweep_param', 'sweep_value'])
    return table


def _slug(text: str) -> str:
    return re.sub(r'[^A-Za-z0-9_.-]+', '_', text).strip('_')


class ResultExporter:
    """Write run artifacts under one output directory"""

    def __init__(self, output_dir: Union[str, Path], config_hash: str):
        """
        Initialize exporter

        Args:
            output_dir: Output directory for reports and curves
            config_hash: Hash of the run config, embedded in every file name
        """
        self.output_dir = Path(output_dir)
        self.output_dir.mkdir(parents=True, exist_ok=True)
        self.config_hash = config_hash

    @property
    def short_hash(self) -> str:
        return self.config_hash[:8]

    def report_path(self, report: EvalReport) -> Path:
        name = (f"report-{_slug(report.task)}-{report.method}-{report.mode}"
                f"-step{report.checkpoint_step or 0}-{self.short_hash}.json")
        return self.output_dir / 'reports' / name

    def write_report(self, report: EvalReport, extra: Dict[str, Any] = None) -> Path:
        """Serialize an EvalReport (plus export metadata) to JSON"""
        path = self.report_path(report)
        path.parent.mkdir(parents=True, exist_ok=True)
        payload = report.to_dict()
        payload['export_date'] = datetime.now().isoformat()
        if extra:
            payload.update(extra)
        with open(path, 'w', encoding='utf-8') as f:
            json.dump(payload, f, indent=2, ensure_ascii=False)
        return path

    def write_training_loss(self, model_kind: str, losses: Sequence[float], window: int = 100) -> Path:
        """Per-step loss with a trailing moving average"""
        path = self.output_dir / f"training_loss-{model_kind}-{self.short_hash}.csv"
        frame = pd.DataFrame({'step': np.arange(1, len(losses) + 1), 'loss': np.asarray(losses, dtype=np.float64)})
        frame['smoothed'] = frame['loss'].rolling(window, min_periods=1).mean()
        frame.to_csv(path, index=False)
        return path

    def write_summary(self, name: str, summary: Dict[str, Any]) -> Path:
        """Run-level JSON summary (the sweep writes its ledger counts and stats here)"""
        path = self.output_dir / f"{name}-{self.short_hash}.json"
        with open(path, 'w', encoding='utf-8') as f:
            json.dump(summary, f, indent=2, ensure_ascii=False, default=str)
        return path


def load_report(path: Union[str, Path]) -> EvalReport:
    with open(path, 'r', encoding='utf-8') as f:
        payload = json.load(f)
    known = {f.name for f in fields(EvalReport)}
    return EvalReport(**{k: v for k, v in payload.items() if k in known})
