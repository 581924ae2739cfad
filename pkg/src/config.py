#!/usr/bin/env python3
"""
Run configuration

Flat dotted keys with documented defaults, layered as
defaults < preset < config file < --set overrides. The canonical text of the
resolved config (sorted `key = json(value)` lines) is hashed with SHA-256.
"""

import hashlib
import json
import math
import os
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Union

try:
    import tomllib
except ImportError:
    import tomli as tomllib

from dotenv import load_dotenv

from .baselines import EnsembleConfig
from .errors import ConfigError
from .evaluation import EvalConfig
from .model import ExPTConfig, PretrainConfig
from .nncore import DTYPES, LrSchedule
from .synthfn import GeneratorConfig

# Load environment variables
load_dotenv()

PRESETS_DIR = Path(__file__).resolve().parent.parent / 'presets'

# key -> (default, type); list types are ('list', element type)
DEFAULTS: Dict[str, tuple] = {
    'run.seed': (0, int),
    'run.output_dir': ('runs', str),
    'run.run_id': ('', str),
    'run.checkpoint_every': (1000, int),
    'run.eval_checkpoints': ([], ('list', int)),
    'run.precision': ('float32', str),
    'run.workers': (0, int),

    'generator.dimension': (32, int),
    'generator.points_per_function': (228, int),
    'generator.context_size': (100, int),
    'generator.lengthscale_range': ([5.0, 10.0], ('list', float)),
    'generator.scale_range': ([1.0, 10.0], ('list', float)),
    'generator.family': ('gp', str),
    'generator.kernel': ('rbf', str),
    'generator.period': (0.0, float),
    'generator.input_source': ('uniform', str),
    'generator.box': ([-3.0, 3.0], ('list', float)),
    'generator.pool': ('', str),
    'generator.input_noise_std': (0.0, float),
    'generator.split_mode': ('random', str),
    'generator.pool_subsample_ratio': (1.0, float),
    'generator.pool_seed': (0, int),

    'model.encoder.layers': (4, int),
    'model.encoder.dim': (128, int),
    'model.encoder.heads': (4, int),
    'model.encoder.dropout': (0.1, float),
    'model.vae.enc_layers': (4, int),
    'model.vae.dec_layers': (4, int),
    'model.vae.hidden': (512, int),
    'model.vae.latent': (32, int),
    'model.kl_weight': (1.0, float),
    'model.recon_variance': (1.0, float),

    'train.models': (['expt'], ('list', str)),
    'train.iterations': (10000, int),
    'train.batch_functions': (128, int),
    'train.lr': (5e-4, float),
    'train.warmup': (1000, int),
    'train.anneal': (9000, int),
    'train.beta1': (0.9, float),
    'train.beta2': (0.99, float),
    'train.eps': (1e-8, float),
    'train.weight_decay': (1e-2, float),

    'eval.q': (256, int),
    'eval.tasks': (['gp-matern52', 'gp-linear', 'gp-cosine', 'gp-periodic'], ('list', str)),
    'eval.methods': (['expt'], ('list', str)),
    'eval.mode': ('simultaneous', str),
    'eval.few_shot': ('below-percentile', str),
    'eval.few_shot_fraction': (0.01, float),
    'eval.few_shot_count': (100, int),
    'eval.few_shot_percentile': (20.0, float),
    'eval.reference_size': (20000, int),
    'eval.task_lengthscale': (5.0, float),
    'eval.task_scale': (1.0, float),
    'eval.task_period': (0.0, float),
    'eval.interpolation': ('nearest', str),
    'eval.y_star': (math.nan, float),
    'eval.match_scale': (1.0, float),
    'eval.ascent_steps': (200, int),
    'eval.ascent_step_size': (1e-2, float),
    'eval.tnp_ed_step_size': (0.1, float),

    'baselines.ensemble.size': (5, int),
    'baselines.ensemble.hidden': (256, int),
    'baselines.ensemble.layers': (2, int),
    'baselines.ensemble.epochs': (500, int),
    'baselines.ensemble.lr': (1e-3, float),
    'baselines.ensemble.weight_decay': (1e-2, float),

    'sweep.seeds': ([0, 1, 2], ('list', int)),
    'sweep.param': ('', str),
    'sweep.values': ([], ('list', object)),
}

# Keys that change where or how fast a run happens, not what it computes
UNHASHED_KEYS = {'run.output_dir', 'run.run_id', 'run.workers'}

RANGE_KEYS = ('generator.lengthscale_range', 'generator.scale_range', 'generator.box')


def _flatten(table: Dict[str, Any], prefix: str = '') -> Dict[str, Any]:
    flat = {}
    for key, value in table.items():
        name = f"{prefix}{key}"
        if isinstance(value, dict):
            flat.update(_flatten(value, name + '.'))
        else:
            flat[name] = value
    return flat


def _coerce(key: str, value: Any) -> Any:
    """Check a value against the declared type of its key"""
    if key not in DEFAULTS:
        raise ConfigError(f"unknown configuration key '{key}'", key=key)
    _, kind = DEFAULTS[key]

    def scalar(v, t):
        if t is float and isinstance(v, (int, float)) and not isinstance(v, bool):
            return float(v)
        if t is int and isinstance(v, int) and not isinstance(v, bool):
            return v
        if t is object:
            return v
        if t is str and isinstance(v, str):
            return v
        raise ConfigError(f"expected {t.__name__}, got {type(v).__name__} {v!r}", key=key)

    if isinstance(kind, tuple):
        if not isinstance(value, list):
            raise ConfigError(f"expected a list, got {type(value).__name__} {value!r}", key=key)
        return [scalar(v, kind[1]) for v in value]
    return scalar(value, kind)


def parse_override(text: str) -> tuple:
    """'key=value' with value read as a TOML value (bare words become strings)"""
    if '=' not in text:
        raise ConfigError(f"override '{text}' is not of the form key=value")
    key, raw = (part.strip() for part in text.split('=', 1))
    try:
        value = tomllib.loads(f"v = {raw}")['v']
    except tomllib.TOMLDecodeError:
        value = raw
    return key, value


def read_toml(path: Union[str, Path]) -> Dict[str, Any]:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        with open(path, 'rb') as f:
            return _flatten(tomllib.load(f))
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def canonical_text(values: Dict[str, Any], prefix: str = '') -> str:
    lines = [f"{key} = {json.dumps(values[key], sort_keys=True)}"
             for key in sorted(values) if key.startswith(prefix) and key not in UNHASHED_KEYS]
    return "\n".join(lines) + "\n"


def text_hash(text: str) -> str:
    return hashlib.sha256(text.encode('utf-8')).hexdigest()


class RunConfig:
    """Fully resolved configuration with typed views per module"""

    def __init__(self, values: Dict[str, Any]):
        self.values = dict(values)
        self.config_hash = text_hash(canonical_text(self.values))
        self.generator_hash = text_hash(canonical_text(self.values, 'generator.'))
        self._validate()

    def __getitem__(self, key: str) -> Any:
        return self.values[key]

    @property
    def short_hash(self) -> str:
        return self.config_hash[:8]

    @property
    def seed(self) -> int:
        return self.values['run.seed']

    @property
    def run_id(self) -> str:
        return self.values['run.run_id'] or f"run-{self.short_hash}"

    @property
    def output_dir(self) -> Path:
        return Path(self.values['run.output_dir'])

    def with_overrides(self, overrides: Dict[str, Any]) -> 'RunConfig':
        values = dict(self.values)
        for key, value in overrides.items():
            values[key] = _coerce(key, value)
        return RunConfig(values)

    def _validate(self) -> None:
        v = self.values
        for key in RANGE_KEYS:
            if len(v[key]) != 2:
                raise ConfigError(f"expected [lo, hi], got {v[key]}", key=key)
        if v['run.precision'] not in DTYPES:
            raise ConfigError(f"expected one of {sorted(DTYPES)}", key='run.precision')
        for model in v['train.models']:
            if model not in ('expt', 'tnp-ed'):
                raise ConfigError(f"unknown model '{model}'", key='train.models')
        if v['train.warmup'] < 0 or v['train.anneal'] < 0:
            raise ConfigError("schedule lengths must be >= 0", key='train.warmup')
        if v['sweep.param'] and v['sweep.param'] not in DEFAULTS:
            raise ConfigError(f"unknown sweep parameter '{v['sweep.param']}'", key='sweep.param')
        if v['sweep.param'] and not v['sweep.values']:
            raise ConfigError("sweep parameter given without values", key='sweep.values')
        for value in (v['sweep.values'] if v['sweep.param'] else []):
            _coerce(v['sweep.param'], value)
        if not v['sweep.seeds']:
            raise ConfigError("need at least one seed", key='sweep.seeds')
        # typed views run every module's own invariant checks
        self.generator_config()
        self.model_config()
        self.pretrain_config()
        self.eval_config()
        self.ensemble_config('grad-mean')

    # --- typed views ------------------------------------------------------

    def generator_config(self) -> GeneratorConfig:
        v = self.values
        return GeneratorConfig(
            dimension=v['generator.dimension'],
            points_per_function=v['generator.points_per_function'],
            context_size=v['generator.context_size'],
            lengthscale_range=tuple(v['generator.lengthscale_range']),
            scale_range=tuple(v['generator.scale_range']),
            family=v['generator.family'],
            kernel=v['generator.kernel'],
            period=v['generator.period'] or None,
            input_source=v['generator.input_source'],
            box=tuple(v['generator.box']),
            pool_id=v['generator.pool'] or None,
            input_noise_std=v['generator.input_noise_std'],
            split_mode=v['generator.split_mode'],
            pool_subsample_ratio=v['generator.pool_subsample_ratio'],
            pool_seed=v['generator.pool_seed'],
        )

    def model_config(self) -> ExPTConfig:
        v = self.values
        return ExPTConfig(
            d_x=v['generator.dimension'],
            layers=v['model.encoder.layers'],
            dim=v['model.encoder.dim'],
            heads=v['model.encoder.heads'],
            dropout=v['model.encoder.dropout'],
            vae_enc_layers=v['model.vae.enc_layers'],
            vae_dec_layers=v['model.vae.dec_layers'],
            vae_hidden=v['model.vae.hidden'],
            latent=v['model.vae.latent'],
            kl_weight=v['model.kl_weight'],
            recon_variance=v['model.recon_variance'],
        )

    def pretrain_config(self, seed: Optional[int] = None, workers: int = 1) -> PretrainConfig:
        v = self.values
        return PretrainConfig(
            iterations=v['train.iterations'],
            batch_functions=v['train.batch_functions'],
            checkpoint_every=v['run.checkpoint_every'],
            schedule=LrSchedule(v['train.lr'], v['train.warmup'], v['train.anneal']),
            beta1=v['train.beta1'],
            beta2=v['train.beta2'],
            eps=v['train.eps'],
            weight_decay=v['train.weight_decay'],
            seed=self.seed if seed is None else seed,
            workers=workers,
        )

    def eval_config(self) -> EvalConfig:
        v = self.values
        y_star = v['eval.y_star']
        return EvalConfig(
            q=v['eval.q'],
            tasks=tuple(v['eval.tasks']),
            methods=tuple(v['eval.methods']),
            mode=v['eval.mode'],
            few_shot=v['eval.few_shot'],
            few_shot_fraction=v['eval.few_shot_fraction'],
            few_shot_count=v['eval.few_shot_count'],
            few_shot_percentile=v['eval.few_shot_percentile'],
            reference_size=v['eval.reference_size'],
            task_lengthscale=v['eval.task_lengthscale'],
            task_scale=v['eval.task_scale'],
            task_period=v['eval.task_period'] or None,
            interpolation=v['eval.interpolation'],
            box=tuple(v['generator.box']),
            y_star=None if math.isnan(y_star) else y_star,
            match_scale=v['eval.match_scale'],
            ascent_steps=v['eval.ascent_steps'],
            ascent_step_size=v['eval.ascent_step_size'],
            tnp_ed_step_size=v['eval.tnp_ed_step_size'],
        )

    def ensemble_config(self, method: str) -> EnsembleConfig:
        v = self.values
        overrides = dict(
            hidden=v['baselines.ensemble.hidden'],
            layers=v['baselines.ensemble.layers'],
            epochs=v['baselines.ensemble.epochs'],
            lr=v['baselines.ensemble.lr'],
            weight_decay=v['baselines.ensemble.weight_decay'],
        )
        if method != 'grad-asc':
            overrides['size'] = v['baselines.ensemble.size']
        return EnsembleConfig.for_method(method, **overrides)


def default_values() -> Dict[str, Any]:
    values = {key: (list(default) if isinstance(default, list) else default)
              for key, (default, _) in DEFAULTS.items()}
    if os.getenv('EXPT_OUTPUT_DIR'):
        values['run.output_dir'] = os.getenv('EXPT_OUTPUT_DIR')
    return values


def preset_path(name: str) -> Path:
    path = PRESETS_DIR / name / 'config.toml'
    if not path.exists():
        available = sorted(p.name for p in PRESETS_DIR.iterdir() if p.is_dir()) if PRESETS_DIR.exists() else []
        raise ConfigError(f"unknown preset '{name}', available: {available}")
    return path


def load_config(path: Optional[Union[str, Path]] = None, overrides: Optional[Iterable] = None,
                preset: Optional[str] = None) -> RunConfig:
    """
    Resolve defaults, preset, config file and overrides into a RunConfig

    Args:
        path: TOML config file (an empty file gives the full defaults)
        overrides: 'key=value' strings or a dict
        preset: name of a directory under presets/

    Returns:
        Validated RunConfig (config_hash / generator_hash attached)
    """
    values = default_values()
    layers: List[Dict[str, Any]] = []
    if preset:
        layers.append(read_toml(preset_path(preset)))
    if path:
        layers.append(read_toml(path))
    if overrides:
        if isinstance(overrides, dict):
            layers.append(dict(overrides))
        else:
            layers.append(dict(parse_override(item) for item in overrides))
    for layer in layers:
        for key, value in layer.items():
            values[key] = _coerce(key, value)
    return RunConfig(values)


def worker_count(config: RunConfig) -> int:
    """Worker pool size: run.workers (0 = all cores), capped by EXPT_THREADS"""
    cap = os.getenv('EXPT_THREADS')
    workers = config['run.workers'] or os.cpu_count() or 1
    if cap:
        try:
            workers = min(workers, max(1, int(cap)))
        except ValueError as exc:
            raise ConfigError(f"EXPT_THREADS must be an integer, got '{cap}'") from exc
    return max(1, workers)
