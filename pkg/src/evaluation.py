#!/usr/bin/env python3
"""
Oracles, few-shot datasets, scoring and the adaptation drivers
"""

import math
import time
import zlib
from dataclasses import asdict, dataclass
from typing import Any, Dict, List, Optional, Tuple, Union

import numpy as np
from scipy import linalg

from .baselines import EnsembleConfig, TnpEdModel, grad_ascent_optimize, surrogate_train, tnp_ed_optimize
from .dataset_api import DatasetClient
from .errors import CandidateOutOfBoxError, ConfigError, InputValidationError, ShapeError
from .model import ExPTModel, generate_candidates
from .synthfn import KernelSpec, cholesky_with_jitter, cross_kernel, kernel_matrix

GP_TASKS = {
    'gp-rbf': 'rbf',
    'gp-matern52': 'matern52',
    'gp-linear': 'linear',
    'gp-cosine': 'cosine',
    'gp-periodic': 'periodic',
}
ANALYTIC_TASKS = ('sphere', 'ackley', 'rastrigin')
INTERPOLATIONS = ('nearest', 'posterior-mean')
METHODS = ('expt', 'tnp-ed', 'grad-asc', 'grad-min', 'grad-mean')
FEW_SHOT_MODES = ('random', 'poorest', 'below-percentile')


@dataclass
class EvalConfig:
    """Adaptation-time settings shared by every task and method"""
    q: int = 256
    tasks: Tuple[str, ...] = ('gp-matern52', 'gp-linear', 'gp-cosine', 'gp-periodic')
    methods: Tuple[str, ...] = ('expt',)
    mode: str = 'simultaneous'
    few_shot: str = 'below-percentile'
    few_shot_fraction: float = 0.01
    few_shot_count: int = 100
    few_shot_percentile: float = 20.0
    reference_size: int = 20000
    task_lengthscale: float = 5.0
    task_scale: float = 1.0
    task_period: Optional[float] = None
    interpolation: str = 'nearest'
    box: Tuple[float, float] = (-3.0, 3.0)
    y_star: Optional[float] = None
    match_scale: float = 1.0
    ascent_steps: int = 200
    ascent_step_size: float = 1e-2
    tnp_ed_step_size: float = 0.1

    def __post_init__(self):
        self.tasks = tuple(self.tasks)
        self.methods = tuple(self.methods)
        self.box = tuple(float(v) for v in self.box)
        if self.q < 1:
            raise ConfigError("budget must be >= 1", key='eval.q')
        for method in self.methods:
            if method not in METHODS:
                raise ConfigError(f"unknown method '{method}', expected one of {METHODS}", key='eval.methods')
        for task in self.tasks:
            if task not in GP_TASKS and task not in ANALYTIC_TASKS and not task.startswith('table:'):
                raise ConfigError(f"unknown task '{task}'", key='eval.tasks')
        if self.mode not in ('simultaneous', 'sequential'):
            raise ConfigError(f"unknown mode '{self.mode}'", key='eval.mode')
        if self.few_shot not in FEW_SHOT_MODES:
            raise ConfigError(f"unknown few-shot selection '{self.few_shot}'", key='eval.few_shot')
        if not 0 < self.few_shot_fraction <= 1:
            raise ConfigError("must lie in (0, 1]", key='eval.few_shot_fraction')
        if self.interpolation not in INTERPOLATIONS:
            raise ConfigError(f"unknown interpolation '{self.interpolation}'", key='eval.interpolation')
        if self.reference_size < 2:
            raise ConfigError("need at least 2 reference points", key='eval.reference_size')
        if self.box[0] >= self.box[1]:
            raise ConfigError("box is empty", key='eval.box')
        if self.ascent_steps < 0:
            raise ConfigError("must be >= 0", key='eval.ascent_steps')


# --- oracles ------------------------------------------------------------------

@dataclass
class OracleMetadata:
    y_min: float
    y_max: float
    y_star: float
    box: Tuple[float, float]
    d: int

    def __post_init__(self):
        if not self.y_min < self.y_max:
            raise InputValidationError(f"oracle needs y_min < y_max, got [{self.y_min}, {self.y_max}]")


def nearest_rows(reference: np.ndarray, queries: np.ndarray, chunk: int = 1024) -> np.ndarray:
    """Index of the nearest reference row for every query (lowest index on ties)"""
    ref_sq = np.sum(reference * reference, axis=1)
    out = np.empty(len(queries), dtype=np.int64)
    for start in range(0, len(queries), chunk):
        block = queries[start:start + chunk]
        d2 = ref_sq[None, :] - 2.0 * (block @ reference.T)
        out[start:start + chunk] = np.argmin(d2, axis=1)
    return out


class Oracle:
    """Deterministic black-box objective with scoring metadata and a call counter"""

    kind = 'base'

    def __init__(self, name: str, reference_x: np.ndarray, reference_y: np.ndarray, metadata: OracleMetadata):
        self.name = name
        self.reference_x = reference_x
        self.reference_y = reference_y
        self.metadata = metadata
        self.calls = 0

    @property
    def box(self) -> Tuple[float, float]:
        return self.metadata.box

    @property
    def y_star(self) -> float:
        return self.metadata.y_star

    @property
    def d(self) -> int:
        return self.metadata.d

    def _check(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 1:
            x = x[None, :]
        if x.ndim != 2 or x.shape[1] != self.d:
            raise ShapeError(f"{self.name}: designs must be [Q, {self.d}], got shape {x.shape}")
        lo, hi = self.box
        bad = np.argwhere(~((x >= lo) & (x <= hi)))
        if bad.size:
            row, col = (int(v) for v in bad[0])
            raise CandidateOutOfBoxError(row, col, float(x[row, col]), lo, hi)
        return x

    def evaluate(self, x: np.ndarray) -> np.ndarray:
        """Scores of [Q, d] designs (a single [d] design is treated as Q=1)"""
        x = self._check(x)
        self.calls += x.shape[0]
        return self._evaluate(x)

    def _evaluate(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError


class SyntheticGPOracle(Oracle):
    """One GP draw on a dense uniform reference sample of the box"""

    kind = 'synthetic-gp'

    def __init__(self, name: str, spec: KernelSpec, d: int, box: Tuple[float, float], reference_size: int,
                 rng: np.random.Generator, interpolation: str = 'nearest'):
        reference_x = rng.uniform(box[0], box[1], size=(reference_size, d))
        # factored in the kernel buffer
        L, _ = cholesky_with_jitter(kernel_matrix(reference_x, spec), spec, overwrite=True)
        reference_y = L @ rng.standard_normal(reference_size)
        self.spec = spec
        self.interpolation = interpolation
        self._alpha = None
        if interpolation == 'posterior-mean':
            self._alpha = linalg.cho_solve((L, True), reference_y, check_finite=False)
        del L
        metadata = OracleMetadata(float(reference_y.min()), float(reference_y.max()), float(reference_y.max()),
                                  box, d)
        super().__init__(name, reference_x, reference_y, metadata)

    def _evaluate(self, x: np.ndarray) -> np.ndarray:
        if self._alpha is not None:
            return cross_kernel(x, self.reference_x, self.spec) @ self._alpha
        return self.reference_y[nearest_rows(self.reference_x, x)]


def _neg_sphere(x: np.ndarray) -> np.ndarray:
    return -np.sum(x * x, axis=1)


def _neg_ackley(x: np.ndarray) -> np.ndarray:
    d = x.shape[1]
    term1 = -20.0 * np.exp(-0.2 * np.sqrt(np.sum(x * x, axis=1) / d))
    term2 = -np.exp(np.sum(np.cos(2 * math.pi * x), axis=1) / d)
    return -(term1 + term2 + 20.0 + math.e)


def _neg_rastrigin(x: np.ndarray) -> np.ndarray:
    return -(10.0 * x.shape[1] + np.sum(x * x - 10.0 * np.cos(2 * math.pi * x), axis=1))


ANALYTIC_FUNCTIONS = {'sphere': _neg_sphere, 'ackley': _neg_ackley, 'rastrigin': _neg_rastrigin}


class AnalyticOracle(Oracle):
    """Negated textbook test function; the optimum value 0 is the target y*"""

    kind = 'analytic'

    def __init__(self, name: str, d: int, box: Tuple[float, float], reference_size: int,
                 rng: np.random.Generator):
        if name not in ANALYTIC_FUNCTIONS:
            raise ConfigError(f"unknown analytic task '{name}'", key='eval.tasks')
        self.function = ANALYTIC_FUNCTIONS[name]
        reference_x = rng.uniform(box[0], box[1], size=(reference_size, d))
        reference_y = self.function(reference_x)
        metadata = OracleMetadata(float(reference_y.min()), float(reference_y.max()), 0.0, box, d)
        super().__init__(name, reference_x, reference_y, metadata)

    def _evaluate(self, x: np.ndarray) -> np.ndarray:
        return self.function(x)


class TableOracle(Oracle):
    """Offline dataset: a design scores as its nearest table row"""

    kind = 'table'

    def __init__(self, name: str, x: np.ndarray, y: np.ndarray, sidecar: Optional[Dict[str, Any]] = None,
                 y_star: Optional[float] = None):
        sidecar = sidecar or {}
        box = tuple(sidecar.get('box', (float(x.min()), float(x.max()))))
        y_min = float(sidecar.get('y_min', y.min()))
        y_max = float(sidecar.get('y_max', y.max()))
        if y_star is None:
            y_star = float(sidecar.get('y_star', y.max()))
        super().__init__(name, x, y, OracleMetadata(y_min, y_max, float(y_star), box, x.shape[1]))

    def _evaluate(self, x: np.ndarray) -> np.ndarray:
        return self.reference_y[nearest_rows(self.reference_x, x)]


def task_rng(task: str, seed: int) -> np.random.Generator:
    """Stream for the held-out function of (task, seed), shared by every method"""
    return np.random.default_rng(np.random.SeedSequence([seed, zlib.crc32(task.encode('utf-8'))]))


def build_task_oracle(task: str, eval_config: EvalConfig, d: int, seed: int,
                      client: Optional[DatasetClient] = None) -> Oracle:
    """
    Resolve a task name into an oracle

    Args:
        task: gp-<kernel>, sphere, ackley, rastrigin or table:<path-or-url>
        eval_config: reference size, task kernel hyperparameters, box
        d: design dimension
        seed: run seed

    Returns:
        Oracle instance with a fresh call counter
    """
    rng = task_rng(task, seed)
    if task in GP_TASKS:
        spec = KernelSpec(GP_TASKS[task], eval_config.task_lengthscale, eval_config.task_scale,
                          eval_config.task_period)
        return SyntheticGPOracle(task, spec, d, eval_config.box, eval_config.reference_size, rng,
                                 eval_config.interpolation)
    if task in ANALYTIC_TASKS:
        return AnalyticOracle(task, d, eval_config.box, eval_config.reference_size, rng)
    if task.startswith('table:'):
        x, y, sidecar = (client or DatasetClient()).load_table(task[len('table:'):])
        if x.shape[1] != d:
            raise ShapeError(f"{task}: table has d={x.shape[1]} but the model expects d={d}")
        return TableOracle(task, x, y, sidecar, eval_config.y_star)
    raise ConfigError(f"unknown task '{task}'", key='eval.tasks')


# --- few-shot datasets --------------------------------------------------------

@dataclass(frozen=True)
class RandomFraction:
    fraction: float = 0.01


@dataclass(frozen=True)
class PoorestFraction:
    fraction: float = 0.01


@dataclass(frozen=True)
class BelowPercentile:
    count: int = 100
    percentile: float = 20.0


SelectionMode = Union[RandomFraction, PoorestFraction, BelowPercentile]


@dataclass
class FewShotDataset:
    x: np.ndarray
    y: np.ndarray
    selection: str = ''
    source_id: str = ''
    seed: Optional[int] = None

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.float64).reshape(-1)
        if self.x.ndim != 2 or self.x.shape[0] != self.y.shape[0]:
            raise ShapeError(f"few-shot x {self.x.shape} and y {self.y.shape} do not line up")
        if self.x.shape[0] < 1:
            raise InputValidationError("few-shot dataset is empty")

    @property
    def n(self) -> int:
        return self.x.shape[0]

    def append(self, x: np.ndarray, y: np.ndarray) -> 'FewShotDataset':
        return FewShotDataset(np.vstack([self.x, np.atleast_2d(x)]), np.concatenate([self.y, np.ravel(y)]),
                              self.selection, self.source_id, self.seed)


def _fraction_count(fraction: float, size: int) -> int:
    if not 0 < fraction <= 1:
        raise InputValidationError(f"fraction {fraction} outside (0, 1]")
    return max(1, int(math.ceil(fraction * size - 1e-9)))


def make_few_shot(source_x: np.ndarray, source_y: np.ndarray, mode: SelectionMode, rng: np.random.Generator,
                  source_id: str = '', seed: Optional[int] = None) -> FewShotDataset:
    """
    Select the labeled few-shot subset of a source dataset

    RandomFraction samples ceil(p * S) points without replacement,
    PoorestFraction takes the ceil(p * S) lowest-y points (stable on ties),
    BelowPercentile samples `count` points strictly below the percentile.
    """
    source_x = np.asarray(source_x, dtype=np.float64)
    source_y = np.asarray(source_y, dtype=np.float64).reshape(-1)
    size = source_y.shape[0]
    if size == 0:
        raise InputValidationError("few-shot source is empty")

    if isinstance(mode, RandomFraction):
        chosen = rng.choice(size, size=_fraction_count(mode.fraction, size), replace=False)
        label = f"random({mode.fraction})"
    elif isinstance(mode, PoorestFraction):
        chosen = np.argsort(source_y, kind='stable')[:_fraction_count(mode.fraction, size)]
        label = f"poorest({mode.fraction})"
    elif isinstance(mode, BelowPercentile):
        threshold = np.percentile(source_y, mode.percentile)
        eligible = np.flatnonzero(source_y < threshold)
        if mode.count > eligible.size:
            raise InputValidationError(f"only {eligible.size} points lie below the {mode.percentile}th "
                                       f"percentile, {mode.count} requested")
        chosen = rng.choice(eligible, size=mode.count, replace=False)
        label = f"below-percentile({mode.count}, {mode.percentile})"
    else:
        raise ConfigError(f"unknown selection mode {mode!r}", key='eval.few_shot')
    return FewShotDataset(source_x[chosen], source_y[chosen], label, source_id, seed)


def selection_from_config(eval_config: EvalConfig) -> SelectionMode:
    if eval_config.few_shot == 'random':
        return RandomFraction(eval_config.few_shot_fraction)
    if eval_config.few_shot == 'poorest':
        return PoorestFraction(eval_config.few_shot_fraction)
    return BelowPercentile(eval_config.few_shot_count, eval_config.few_shot_percentile)


# --- scoring ------------------------------------------------------------------

def normalize_score(y, oracle) -> Union[float, np.ndarray]:
    """(y - y_min) / (y_max - y_min); not clipped to [0, 1]"""
    meta = oracle.metadata if isinstance(oracle, Oracle) else oracle
    span = meta.y_max - meta.y_min
    if span == 0:
        raise InputValidationError("cannot normalize: y_max equals y_min")
    if np.ndim(y) == 0:
        return (float(y) - meta.y_min) / span
    return (np.asarray(y, dtype=np.float64) - meta.y_min) / span


def lower_median(values: np.ndarray) -> float:
    ordered = np.sort(np.asarray(values, dtype=np.float64))
    return float(ordered[(len(ordered) - 1) // 2])


@dataclass
class EvalReport:
    scores_raw: List[float]
    scores_norm: List[float]
    median: float
    max: float
    mean: float
    few_shot_best_norm: float
    seed: Optional[int] = None
    checkpoint_step: Optional[int] = None
    config_hash: str = ''
    task: str = ''
    method: str = ''
    mode: str = 'simultaneous'
    q: int = 0
    wall_time_s: float = 0.0

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


def build_report(scores_raw: np.ndarray, oracle: Oracle, few_shot: Optional[FewShotDataset] = None,
                 **provenance) -> EvalReport:
    """Normalized statistics of already-evaluated scores"""
    scores_raw = np.asarray(scores_raw, dtype=np.float64)
    scores_norm = normalize_score(scores_raw, oracle)
    best = normalize_score(float(np.max(few_shot.y)), oracle) if few_shot is not None else float('nan')
    return EvalReport(
        scores_raw=scores_raw.tolist(),
        scores_norm=scores_norm.tolist(),
        median=lower_median(scores_norm),
        max=float(np.max(scores_norm)),
        mean=float(np.mean(scores_norm)),
        few_shot_best_norm=best,
        q=int(scores_raw.shape[0]),
        **provenance,
    )


def evaluate_candidates(candidates: np.ndarray, oracle: Oracle, few_shot: Optional[FewShotDataset] = None,
                        **provenance) -> EvalReport:
    """Score Q candidates with exactly Q oracle calls"""
    candidates = np.asarray(candidates, dtype=np.float64)
    if candidates.ndim != 2 or candidates.shape[0] < 1:
        raise InputValidationError(f"need a non-empty [Q, d] candidate array, got shape {candidates.shape}")
    return build_report(oracle.evaluate(candidates), oracle, few_shot, **provenance)


# --- adaptation methods -------------------------------------------------------

class AdaptationMethod:
    name = 'base'

    def propose(self, few_shot: FewShotDataset, oracle: Oracle, q: int, rng: np.random.Generator) -> np.ndarray:
        raise NotImplementedError


class ExptMethod(AdaptationMethod):
    """Condition the pretrained inverse model on the few-shot set and y*"""

    name = 'expt'

    def __init__(self, model: ExPTModel, match_scale: float = 1.0):
        self.model = model
        self.match_scale = match_scale

    def propose(self, few_shot, oracle, q, rng):
        return generate_candidates(few_shot, oracle.y_star, q, self.model, rng, box=oracle.box,
                                   match_scale=self.match_scale)


class TnpEdMethod(AdaptationMethod):
    name = 'tnp-ed'

    def __init__(self, model: TnpEdModel, steps: int = 200, step_size: float = 0.1):
        self.model = model
        self.steps = steps
        self.step_size = step_size

    def propose(self, few_shot, oracle, q, rng):
        return tnp_ed_optimize(few_shot, self.model, self.steps, self.step_size, q, box=oracle.box)


class GradAscentMethod(AdaptationMethod):
    """Fit a surrogate ensemble to the few-shot set, then ascend it"""

    def __init__(self, variant: str, ensemble_config: Optional[EnsembleConfig] = None, steps: int = 200,
                 step_size: float = 1e-2, verbose: bool = True):
        if variant not in ('grad-asc', 'grad-min', 'grad-mean'):
            raise ConfigError(f"unknown gradient-ascent variant '{variant}'", key='eval.methods')
        self.name = variant
        self.ensemble_config = ensemble_config or EnsembleConfig.for_method(variant)
        self.steps = steps
        self.step_size = step_size
        self.verbose = verbose

    def propose(self, few_shot, oracle, q, rng):
        ensemble = surrogate_train(few_shot, self.ensemble_config, rng, verbose=self.verbose)
        return grad_ascent_optimize(ensemble, few_shot, self.steps, self.step_size, q, box=oracle.box)


def run_adaptation(method: AdaptationMethod, few_shot: FewShotDataset, oracle: Oracle, q: int,
                   rng: np.random.Generator, **provenance) -> EvalReport:
    """Propose Q candidates in one shot and score them"""
    started = time.perf_counter()
    candidates = method.propose(few_shot, oracle, q, rng)
    report = evaluate_candidates(candidates, oracle, few_shot, method=method.name, mode='simultaneous',
                                 **provenance)
    report.wall_time_s = time.perf_counter() - started
    return report


def sequential_rollout(few_shot: FewShotDataset, oracle: Oracle, q: int, method: AdaptationMethod,
                       rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray, FewShotDataset]:
    """
    Generate, evaluate and append one candidate at a time

    Returns:
        (candidates [Q, d], raw scores [Q], final context with n + Q points)
    """
    if q < 1:
        raise InputValidationError(f"Q must be >= 1, got {q}")
    context = few_shot
    candidates, scores = [], []
    for _ in range(q):
        x = method.propose(context, oracle, 1, rng)
        y = oracle.evaluate(x)
        candidates.append(x[0])
        scores.append(float(y[0]))
        context = context.append(x, y)
    return np.array(candidates), np.array(scores), context


def run_sequential(few_shot: FewShotDataset, oracle: Oracle, q: int, model, rng: np.random.Generator,
                   **provenance) -> EvalReport:
    """Sequential sampling; statistics over the Q evaluated scores"""
    method = ExptMethod(model) if isinstance(model, ExPTModel) else model
    started = time.perf_counter()
    _, scores, _ = sequential_rollout(few_shot, oracle, q, method, rng)
    report = build_report(scores, oracle, few_shot, method=method.name, mode='sequential', **provenance)
    report.wall_time_s = time.perf_counter() - started
    return report
