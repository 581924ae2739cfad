#!/usr/bin/env python3
"""
Synthetic pretraining functions

Draws functions from Gaussian-process priors and from randomly initialized
MLPs over a design domain, and assembles them into context/target episodes.
Everything here is a pure function of its inputs and an explicit numpy rng.
"""

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, List, Optional, Tuple, Union

import numpy as np
import pandas as pd
from scipy.linalg import lapack

from .errors import ConfigError, DegenerateKernelError, InputValidationError, ShapeError

KERNEL_KINDS = ('rbf', 'matern52', 'linear', 'cosine', 'periodic')
INPUT_SOURCES = ('uniform', 'pool')
SPLIT_MODES = ('random', 'sorted')
FAMILIES = ('gp', 'mlp')

MLP_INIT_METHODS = ('uniform', 'normal', 'xavier-uniform', 'xavier-normal',
                    'kaiming-uniform', 'kaiming-normal')
MLP_HIDDEN_SIZES = (16, 32, 64, 128, 256, 512, 1024)
MLP_DEPTHS = (2, 3, 4, 5, 6)

# Cholesky jitter, relative to max(sigma^2, 1)
JITTER_START = 1e-6
JITTER_MAX = 1e-2

# kernel entries computed per row block, and the tile edge for in-place triangle copies
_BLOCK_ELEMENTS = 1 << 18
_MIRROR_BLOCK = 512

# GP-hyperparameter sensitivity study: config overrides per sweep arm
SENSITIVITY_PRESETS = {
    'small-scale': {'generator.scale_range': [0.01, 0.1]},
    'large-scale': {'generator.scale_range': [100.0, 200.0]},
    'small-lengthscale': {'generator.lengthscale_range': [0.1, 1.0]},
    'large-lengthscale': {'generator.lengthscale_range': [100.0, 200.0]},
}


@dataclass(frozen=True)
class KernelSpec:
    """Covariance function of a zero-mean GP prior"""
    kind: str = 'rbf'
    lengthscale: float = 1.0
    scale: float = 1.0
    period: Optional[float] = None

    def __post_init__(self):
        kind = str(self.kind).lower()
        if kind not in KERNEL_KINDS:
            raise ConfigError(f"unknown kernel kind '{self.kind}', expected one of {KERNEL_KINDS}",
                              key='generator.kernel')
        object.__setattr__(self, 'kind', kind)
        if not self.lengthscale > 0:
            raise ConfigError(f"lengthscale must be > 0, got {self.lengthscale}", key='generator.lengthscale_range')
        if not self.scale >= 0:
            raise ConfigError(f"scale must be >= 0, got {self.scale}", key='generator.scale_range')
        if self.period is not None and not self.period > 0:
            raise ConfigError(f"period must be > 0, got {self.period}", key='generator.period')

    @property
    def effective_period(self) -> float:
        return self.period if self.period is not None else 2.0 * self.lengthscale

    def describe(self) -> str:
        text = f"{self.kind}(l={self.lengthscale:.4g}, s={self.scale:.4g}"
        if self.kind == 'periodic':
            text += f", p={self.effective_period:.4g}"
        return text + ")"


@dataclass(frozen=True)
class MlpGeneratorSpec:
    """Randomly initialized tanh MLP used as a synthetic function"""
    init_method: str = 'xavier-uniform'
    hidden_size: int = 64
    depth: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.init_method not in MLP_INIT_METHODS:
            raise ConfigError(f"unknown init method '{self.init_method}'", key='generator.mlp.init_method')
        if self.hidden_size not in MLP_HIDDEN_SIZES:
            raise ConfigError(f"hidden size {self.hidden_size} not in {MLP_HIDDEN_SIZES}",
                              key='generator.mlp.hidden_size')
        if self.depth not in MLP_DEPTHS:
            raise ConfigError(f"depth {self.depth} not in {MLP_DEPTHS}", key='generator.mlp.depth')

    @property
    def kind(self) -> str:
        return 'mlp'

    def describe(self) -> str:
        return f"mlp({self.init_method}, {self.depth}x{self.hidden_size}, seed={self.seed})"


Generator = Union[KernelSpec, MlpGeneratorSpec]


@dataclass
class GeneratorConfig:
    """Parameterization of the synthetic function family and its episodes"""
    dimension: int = 32
    points_per_function: int = 228
    context_size: int = 100
    lengthscale_range: Tuple[float, float] = (5.0, 10.0)
    scale_range: Tuple[float, float] = (1.0, 10.0)
    family: str = 'gp'
    kernel: str = 'rbf'
    period: Optional[float] = None
    input_source: str = 'uniform'
    box: Tuple[float, float] = (-3.0, 3.0)
    pool_id: Optional[str] = None
    input_noise_std: float = 0.0
    split_mode: str = 'random'
    pool_subsample_ratio: float = 1.0
    pool_seed: int = 0

    def __post_init__(self):
        self.lengthscale_range = tuple(float(v) for v in self.lengthscale_range)
        self.scale_range = tuple(float(v) for v in self.scale_range)
        self.box = tuple(float(v) for v in self.box)
        self.validate()

    def validate(self) -> None:
        if self.dimension < 1:
            raise ConfigError("must be a positive integer", key='generator.dimension')
        if self.points_per_function < 2:
            raise ConfigError("must be at least 2", key='generator.points_per_function')
        if not 0 < self.context_size < self.points_per_function:
            raise ConfigError(f"context size {self.context_size} must lie in "
                              f"(0, {self.points_per_function})", key='generator.context_size')
        for key, (lo, hi) in (('generator.lengthscale_range', self.lengthscale_range),
                              ('generator.scale_range', self.scale_range)):
            if lo > hi:
                raise ConfigError(f"range [{lo}, {hi}] has lo > hi", key=key)
        if self.lengthscale_range[0] <= 0:
            raise ConfigError("lengthscales must be positive", key='generator.lengthscale_range')
        if self.scale_range[0] < 0:
            raise ConfigError("scales must be non-negative", key='generator.scale_range')
        if self.family not in FAMILIES:
            raise ConfigError(f"unknown family '{self.family}'", key='generator.family')
        if self.kernel.lower() not in KERNEL_KINDS:
            raise ConfigError(f"unknown kernel kind '{self.kernel}'", key='generator.kernel')
        if self.input_source not in INPUT_SOURCES:
            raise ConfigError(f"unknown input source '{self.input_source}'", key='generator.input_source')
        if self.input_source == 'pool' and not self.pool_id:
            raise ConfigError("pool input source needs a pool file", key='generator.pool')
        if self.box[0] >= self.box[1]:
            raise ConfigError(f"box [{self.box[0]}, {self.box[1]}] is empty", key='generator.box')
        if self.input_noise_std < 0:
            raise ConfigError("must be non-negative", key='generator.input_noise_std')
        if self.split_mode not in SPLIT_MODES:
            raise ConfigError(f"unknown split mode '{self.split_mode}'", key='generator.split_mode')
        if not 0 < self.pool_subsample_ratio <= 1:
            raise ConfigError("must lie in (0, 1]", key='generator.pool_subsample_ratio')

    @property
    def target_size(self) -> int:
        return self.points_per_function - self.context_size


@dataclass
class Episode:
    """One sampled function split into context and target points"""
    context_x: np.ndarray
    context_y: np.ndarray
    target_x: np.ndarray
    target_y: np.ndarray
    provenance: Tuple[Any, Any] = field(default=(None, None))

    @property
    def m(self) -> int:
        return self.context_x.shape[0]

    @property
    def n_targets(self) -> int:
        return self.target_x.shape[0]

    @property
    def dimension(self) -> int:
        return self.context_x.shape[1]


# --- kernels ------------------------------------------------------------------

def _check_inputs(X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise ShapeError(f"kernel inputs must be [N, d], got shape {X.shape}")
    if not np.all(np.isfinite(X)):
        raise InputValidationError("kernel inputs contain non-finite values")
    return X


def _kernel_rows(A: np.ndarray, B: np.ndarray, b_norms: np.ndarray, spec: KernelSpec) -> np.ndarray:
    """Stationary covariance between a slice of rows A and all rows of B"""
    variance = spec.scale ** 2
    ell = spec.lengthscale
    if spec.kind in ('rbf', 'matern52'):
        d2 = A @ B.T
        d2 *= -2.0
        d2 += np.sum(A * A, axis=1)[:, None]
        d2 += b_norms[None, :]
        np.maximum(d2, 0.0, out=d2)
        if spec.kind == 'rbf':
            d2 *= -1.0 / (2.0 * ell * ell)
            return variance * np.exp(d2, out=d2)
        a = np.sqrt(d2, out=d2)
        a *= math.sqrt(5.0) / ell
        return variance * (1.0 + a + a * a / 3.0) * np.exp(-a)
    if spec.kind == 'cosine':
        # product of per-coordinate cosine kernels
        K = np.full((A.shape[0], B.shape[0]), variance)
        for i in range(A.shape[1]):
            K *= np.cos((A[:, i, None] - B[None, :, i]) / ell)
        return K
    period = spec.effective_period
    total = np.zeros((A.shape[0], B.shape[0]))
    for i in range(A.shape[1]):
        total += np.sin(math.pi * np.abs(A[:, i, None] - B[None, :, i]) / period) ** 2
    return variance * np.exp(-2.0 * total / (ell * ell))


def cross_kernel(A: np.ndarray, B: np.ndarray, spec: KernelSpec) -> np.ndarray:
    """
    Covariance between the rows of A and the rows of B

    Stationary kernels are filled in row blocks of about _BLOCK_ELEMENTS
    entries, so the only full-size allocation is the result.

    Args:
        A: [N, d] inputs
        B: [M, d] inputs
        spec: kernel specification

    Returns:
        [N, M] matrix
    """
    A, B = _check_inputs(A), _check_inputs(B)
    if A.shape[1] != B.shape[1]:
        raise ShapeError(f"kernel inputs disagree on dimension: {A.shape[1]} vs {B.shape[1]}")
    if not isinstance(spec, KernelSpec):
        raise ConfigError(f"not a kernel spec: {spec!r}", key='generator.kernel')

    if spec.kind == 'linear':
        K = A @ B.T
        K *= spec.scale ** 2
        return K
    K = np.empty((A.shape[0], B.shape[0]))
    b_norms = np.sum(B * B, axis=1)
    rows = max(1, _BLOCK_ELEMENTS // max(B.shape[0], 1))
    for start in range(0, A.shape[0], rows):
        K[start:start + rows] = _kernel_rows(A[start:start + rows], B, b_norms, spec)
    return K


def _mirror_lower(K: np.ndarray) -> np.ndarray:
    """Copy the strict lower triangle of square K onto its upper triangle, in place"""
    n = K.shape[0]
    for start in range(0, n, _MIRROR_BLOCK):
        stop = min(start + _MIRROR_BLOCK, n)
        block = K[start:stop, start:stop]
        upper = np.triu_indices(stop - start, 1)
        block[upper] = block.T[upper]
        for col in range(stop, n, _MIRROR_BLOCK):
            end = min(col + _MIRROR_BLOCK, n)
            K[start:stop, col:end] = K[col:end, start:stop].T
    return K


def _zero_upper(L: np.ndarray) -> np.ndarray:
    """Zero the strict upper triangle of square L, in place"""
    n = L.shape[0]
    for start in range(0, n, _MIRROR_BLOCK):
        stop = min(start + _MIRROR_BLOCK, n)
        block = L[start:stop, start:stop]
        block[np.triu_indices(stop - start, 1)] = 0.0
        L[start:stop, stop:] = 0.0
    return L


def kernel_matrix(X: np.ndarray, spec: KernelSpec) -> np.ndarray:
    """Covariance matrix of the GP prior at the rows of X, exactly symmetric"""
    X = _check_inputs(X)
    K = cross_kernel(X, X, spec)
    if spec.kind in ('rbf', 'matern52', 'cosine', 'periodic'):
        np.fill_diagonal(K, spec.scale ** 2)
    return _mirror_lower(K)


def cholesky_with_jitter(K: np.ndarray, spec: KernelSpec, overwrite: bool = False) -> Tuple[np.ndarray, float]:
    """
    Lower Cholesky factor of K + jitter * I and the jitter that worked

    Jitter starts at 1e-6 * max(sigma^2, 1) and grows tenfold up to
    1e-2 * max(sigma^2, 1). Only the lower triangle of K is read.

    Args:
        K: symmetric [n, n] matrix
        spec: kernel the matrix came from (sets the jitter scale)
        overwrite: factor in K's own memory; K is destroyed, and a failed
            attempt is undone from the untouched triangle before retrying

    Returns:
        (L, jitter), L lower triangular with a zero upper triangle
    """
    n = K.shape[0]
    base = max(spec.scale ** 2, 1.0)
    if overwrite and K.dtype == np.float64 and K.flags.f_contiguous:
        work = K
    elif overwrite and K.dtype == np.float64 and K.flags.c_contiguous:
        # the transpose of a symmetric matrix is itself, and is Fortran-ordered
        work = K.T
    else:
        work = np.array(K, dtype=np.float64, order='F')
    diagonal = work.diagonal().copy()
    jitter = JITTER_START * base
    while True:
        np.fill_diagonal(work, diagonal + jitter)
        factor, info = lapack.dpotrf(work, lower=1, clean=0, overwrite_a=1)
        if info == 0:
            return _zero_upper(factor), jitter
        if info < 0:
            raise InputValidationError(f"dpotrf rejected argument {-info}")
        if jitter >= JITTER_MAX * base * (1.0 - 1e-9):
            raise DegenerateKernelError(
                f"Cholesky of the {n}x{n} {spec.describe()} kernel matrix failed", jitter)
        if np.may_share_memory(factor, work):
            # potrf only touched the lower triangle
            _mirror_lower(work.T)
        jitter *= 10.0


def sample_gp_values(X: np.ndarray, spec: KernelSpec, rng: np.random.Generator) -> np.ndarray:
    """One draw f ~ GP(0, K) at the rows of X"""
    X = _check_inputs(X)
    if X.shape[0] < 1:
        raise ShapeError("need at least one input row")
    L, _ = cholesky_with_jitter(kernel_matrix(X, spec), spec, overwrite=True)
    return L @ rng.standard_normal(X.shape[0])


# --- inputs -------------------------------------------------------------------

def subsample_pool(pool: np.ndarray, ratio: float, seed: int = 0) -> np.ndarray:
    """Fixed subset of floor(ratio * P) pool rows, the same for every call with the same seed"""
    pool = np.asarray(pool, dtype=np.float64)
    if pool.ndim != 2 or pool.shape[0] == 0:
        raise InputValidationError("unlabeled pool is empty")
    if not 0 < ratio <= 1:
        raise ConfigError(f"ratio {ratio} outside (0, 1]", key='generator.pool_subsample_ratio')
    count = int(math.floor(ratio * pool.shape[0] + 1e-9))
    if count < 1:
        raise InputValidationError(
            f"subsample ratio {ratio} leaves no rows of a {pool.shape[0]}-row pool")
    if count == pool.shape[0]:
        return pool
    keep = np.random.default_rng(seed).choice(pool.shape[0], size=count, replace=False)
    return pool[np.sort(keep)]


def sample_inputs(config: GeneratorConfig, pool: Optional[np.ndarray], rng: np.random.Generator) -> np.ndarray:
    """Draw the N_total input rows of one episode"""
    n, d = config.points_per_function, config.dimension
    if config.input_source == 'uniform':
        lo, hi = config.box
        return rng.uniform(lo, hi, size=(n, d))

    if pool is None or len(pool) == 0:
        raise InputValidationError("pool input source selected but the pool is empty")
    pool = np.asarray(pool, dtype=np.float64)
    if pool.ndim != 2 or pool.shape[1] != d:
        raise ShapeError(f"pool rows have shape {pool.shape[1:]} but the generator dimension is {d}")
    effective = subsample_pool(pool, config.pool_subsample_ratio, config.pool_seed)
    X = effective[rng.integers(0, effective.shape[0], size=n)]
    if config.input_noise_std > 0:
        X = X + rng.normal(0.0, config.input_noise_std, size=X.shape)
    return X


# --- random MLP generator -----------------------------------------------------

def _init_weight(rng: np.random.Generator, method: str, fan_in: int, fan_out: int) -> np.ndarray:
    shape = (fan_in, fan_out)
    if method == 'uniform':
        return rng.uniform(-1.0, 1.0, size=shape)
    if method == 'normal':
        return rng.normal(0.0, 1.0, size=shape)
    if method == 'xavier-uniform':
        bound = math.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-bound, bound, size=shape)
    if method == 'xavier-normal':
        return rng.normal(0.0, math.sqrt(2.0 / (fan_in + fan_out)), size=shape)
    if method == 'kaiming-uniform':
        bound = math.sqrt(6.0 / fan_in)
        return rng.uniform(-bound, bound, size=shape)
    return rng.normal(0.0, math.sqrt(2.0 / fan_in), size=shape)


def mlp_function_values(X: np.ndarray, spec: MlpGeneratorSpec) -> np.ndarray:
    """Evaluate the random MLP described by spec and standardize over the N points"""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise ShapeError(f"inputs must be [N, d], got shape {X.shape}")
    rng = np.random.default_rng(spec.seed)
    h = X
    fan_in = X.shape[1]
    widths = [spec.hidden_size] * spec.depth + [1]
    for i, width in enumerate(widths):
        weight = _init_weight(rng, spec.init_method, fan_in, width)
        bound = 1.0 / math.sqrt(fan_in)
        bias = rng.uniform(-bound, bound, size=width)
        h = h @ weight + bias
        if i < len(widths) - 1:
            h = np.tanh(h)
        fan_in = width
    out = h[:, 0]
    out = out - out.mean()
    std = out.std()
    return out / std if std > 1e-12 else out


def sample_mlp_spec(rng: np.random.Generator) -> MlpGeneratorSpec:
    return MlpGeneratorSpec(
        init_method=MLP_INIT_METHODS[rng.integers(len(MLP_INIT_METHODS))],
        hidden_size=int(MLP_HIDDEN_SIZES[rng.integers(len(MLP_HIDDEN_SIZES))]),
        depth=int(MLP_DEPTHS[rng.integers(len(MLP_DEPTHS))]),
        seed=int(rng.integers(2 ** 31)),
    )


def sample_generator(config: GeneratorConfig, rng: np.random.Generator) -> Generator:
    """Draw one function generator from the configured family"""
    if config.family == 'mlp':
        return sample_mlp_spec(rng)
    return KernelSpec(
        kind=config.kernel,
        lengthscale=float(rng.uniform(*config.lengthscale_range)),
        scale=float(rng.uniform(*config.scale_range)),
        period=config.period,
    )


# --- episodes -----------------------------------------------------------------

def draw_episode(config: GeneratorConfig, generator: Generator, pool: Optional[np.ndarray],
                 rng: np.random.Generator, seed: Any = None) -> Episode:
    """
    Sample one function and split its points into context and targets

    Args:
        config: generator configuration
        generator: KernelSpec (GP draw) or MlpGeneratorSpec
        pool: unlabeled design pool for the pool input source
        rng: random stream for inputs, function values and the split
        seed: recorded in the episode provenance

    Returns:
        Episode with m context points and N_total - m targets
    """
    X = sample_inputs(config, pool, rng)
    if isinstance(generator, KernelSpec):
        y = sample_gp_values(X, generator, rng)
    elif isinstance(generator, MlpGeneratorSpec):
        y = mlp_function_values(X, generator)
    else:
        raise ConfigError(f"unsupported generator {generator!r}", key='generator.family')

    if config.split_mode == 'sorted':
        order = np.argsort(y, kind='stable')
    else:
        order = rng.permutation(len(y))
    context, target = order[:config.context_size], order[config.context_size:]
    return Episode(X[context], y[context], X[target], y[target], provenance=(generator, seed))


def episode_rng(seed: int, iteration: int, index: int) -> np.random.Generator:
    """Independent stream for episode `index` of pretraining iteration `iteration`"""
    return np.random.default_rng(np.random.SeedSequence([seed, iteration, index]))


def draw_episode_batch(config: GeneratorConfig, pool: Optional[np.ndarray], seed: int, iteration: int,
                       count: int, workers: int = 1) -> List[Episode]:
    """Draw `count` episodes; the result does not depend on the worker count"""
    def one(index: int) -> Episode:
        rng = episode_rng(seed, iteration, index)
        return draw_episode(config, sample_generator(config, rng), pool, rng, seed=(seed, iteration, index))

    if workers <= 1 or count <= 1:
        return [one(i) for i in range(count)]
    with ThreadPoolExecutor(max_workers=workers) as executor:
        return list(executor.map(one, range(count)))


# --- files --------------------------------------------------------------------

def load_pool_csv(path: Union[str, Path]) -> np.ndarray:
    """Read a pool CSV with header x_0..x_{d-1}"""
    frame = pd.read_csv(path)
    expected = [f"x_{i}" for i in range(len(frame.columns))]
    if list(frame.columns) != expected:
        raise InputValidationError(f"{path}: pool header must be x_0..x_{{d-1}}, got {list(frame.columns)}")
    values = frame.to_numpy(dtype=np.float64)
    if values.shape[0] == 0:
        raise InputValidationError(f"{path}: pool file has no rows")
    if not np.all(np.isfinite(values)):
        raise InputValidationError(f"{path}: pool file contains non-finite values")
    return values


def write_episode_csv(episode: Episode, path: Union[str, Path]) -> None:
    """Debug dump: pool-style columns plus y and role"""
    d = episode.dimension
    x = np.vstack([episode.context_x, episode.target_x])
    frame = pd.DataFrame(x, columns=[f"x_{i}" for i in range(d)])
    frame['y'] = np.concatenate([episode.context_y, episode.target_y])
    frame['role'] = ['context'] * episode.m + ['target'] * episode.n_targets
    frame.to_csv(path, index=False)
