#!/usr/bin/env python3
"""
ExPT encoder-decoder

Context pairs (y_i, x_i) and target values y_j are embedded, encoded by a
masked transformer, and each target hidden state h_j conditions a VAE that
reconstructs x_j. At adaptation time the targets are all set to the desired
value y* and the decoder turns prior samples into candidate designs.
"""

import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import ConfigError, InputValidationError, NumericError, ShapeError
from .nncore import (AttentionMask, Linear, LrSchedule, MLP, Module, OptimizerState, Tensor,
                     TransformerEncoder, adamw_step, compute_gradients, concat, kl_diag_gaussian,
                     lr_at, reparameterize)
from .synthfn import Episode, GeneratorConfig, draw_episode_batch

# Floor for the std used to z-score few-shot y values
Y_STD_FLOOR = 1e-6


@dataclass
class ExPTConfig:
    """Architecture and objective hyperparameters"""
    d_x: int = 32
    layers: int = 4
    dim: int = 128
    heads: int = 4
    dropout: float = 0.1
    vae_enc_layers: int = 4
    vae_dec_layers: int = 4
    vae_hidden: int = 512
    latent: int = 32
    kl_weight: float = 1.0
    recon_variance: float = 1.0

    def __post_init__(self):
        if self.d_x < 1:
            raise ConfigError("must be a positive integer", key='generator.dimension')
        if self.layers < 1:
            raise ConfigError("need at least one layer", key='model.encoder.layers')
        if self.heads < 1 or self.dim % self.heads:
            raise ConfigError(f"dim {self.dim} is not divisible by {self.heads} heads", key='model.encoder.heads')
        if not 0 <= self.dropout < 1:
            raise ConfigError("must lie in [0, 1)", key='model.encoder.dropout')
        if self.vae_enc_layers < 1 or self.vae_dec_layers < 1:
            raise ConfigError("VAE networks need at least one layer", key='model.vae.enc_layers')
        if self.latent < 1:
            raise ConfigError("latent size must be >= 1", key='model.vae.latent')
        if self.kl_weight < 0:
            raise ConfigError("must be >= 0", key='model.kl_weight')
        if not self.recon_variance > 0:
            raise ConfigError("must be > 0", key='model.recon_variance')

    def to_dict(self) -> Dict[str, float]:
        return asdict(self)


def build_mask(m: int, n: int) -> AttentionMask:
    """
    Context tokens see only the context; each target sees the context and itself

    Args:
        m: number of context tokens (indices 0..m-1)
        n: total number of tokens

    Returns:
        AttentionMask of shape [n, n]
    """
    if not 0 < m < n:
        raise InputValidationError(f"mask needs 0 < m < N, got m={m}, N={n}")
    allow = np.zeros((n, n), dtype=bool)
    allow[:, :m] = True
    targets = np.arange(m, n)
    allow[targets, targets] = True
    return AttentionMask(allow)


class InContextEncoder(Module):
    """Shared token embedding + masked transformer for in-context models"""

    kind = 'base'

    def __init__(self, config: ExPTConfig, target_width: int, rng: np.random.Generator, dtype=None):
        super().__init__()
        self.config = config
        self.pair_embedder = Linear(config.d_x + 1, config.dim, rng, dtype)
        self.target_embedder = Linear(target_width, config.dim, rng, dtype)
        self.encoder = TransformerEncoder(config.layers, config.dim, config.heads, 4 * config.dim,
                                          config.dropout, rng, dtype)

    def _cast(self, values) -> Tensor:
        if isinstance(values, Tensor):
            return values
        return Tensor(np.asarray(values, dtype=self.dtype))

    def encode(self, context_x, context_y, target_tokens, rng: Optional[np.random.Generator] = None) -> Tensor:
        """
        Encode batched sequences and return the target hidden states

        Args:
            context_x: [B, m, d_x]
            context_y: [B, m]
            target_tokens: [B, T, target_width]
            rng: dropout stream (only used in training mode)

        Returns:
            Tensor [B, T, D]
        """
        context_x = self._cast(context_x)
        context_y = self._cast(context_y)
        target_tokens = self._cast(target_tokens)
        if context_x.ndim != 3 or context_x.shape[-1] != self.config.d_x:
            raise ShapeError(f"context x has shape {context_x.shape}, model expects [B, m, {self.config.d_x}]")
        batch, m = context_x.shape[0], context_x.shape[1]
        if m < 1:
            raise InputValidationError("context is empty")
        if context_y.shape != (batch, m):
            raise ShapeError(f"context y has shape {context_y.shape}, expected {(batch, m)}")
        if target_tokens.ndim != 3 or target_tokens.shape[0] != batch:
            raise ShapeError(f"target tokens have shape {target_tokens.shape}")
        t = target_tokens.shape[1]
        if t < 1:
            raise InputValidationError("need at least one target token")

        pairs = concat([context_y.reshape((batch, m, 1)), context_x], axis=-1)
        tokens = concat([self.pair_embedder(pairs), self.target_embedder(target_tokens)], axis=1)
        hidden = self.encoder(tokens, build_mask(m, m + t), rng)
        return hidden[:, m:, :]

    def batch_loss(self, episodes: Sequence[Episode], rng: np.random.Generator) -> Tensor:
        raise NotImplementedError


class ExPTModel(InContextEncoder):
    """Inverse model: target tokens are y values, the head is a conditional VAE over x"""

    kind = 'expt'

    def __init__(self, config: ExPTConfig, rng: np.random.Generator, dtype=None):
        super().__init__(config, 1, rng, dtype)
        k, hidden = config.latent, config.vae_hidden
        self.vae_encoder = MLP([config.d_x + config.dim] + [hidden] * (config.vae_enc_layers - 1) + [2 * k],
                               rng, dtype=dtype)
        self.vae_decoder = MLP([k + config.dim] + [hidden] * (config.vae_dec_layers - 1) + [config.d_x],
                               rng, dtype=dtype)

    def batch_loss(self, episodes: Sequence[Episode], rng: np.random.Generator) -> Tensor:
        return batch_pretrain_loss(episodes, self, rng)


def context_arrays(context) -> Tuple[np.ndarray, np.ndarray]:
    if isinstance(context, Episode):
        return context.context_x, context.context_y
    if hasattr(context, 'x') and hasattr(context, 'y'):
        return np.asarray(context.x), np.asarray(context.y)
    x, y = context
    return np.asarray(x), np.asarray(y)


def embed_and_encode(context, target_y, model: ExPTModel, rng: Optional[np.random.Generator] = None) -> Tensor:
    """Hidden states [T, D] of the targets for one (unbatched) context"""
    x, y = context_arrays(context)
    if x.ndim != 2 or x.shape[0] < 1:
        raise InputValidationError("context must be a non-empty [m, d_x] array")
    if x.shape[1] != model.config.d_x:
        raise ShapeError(f"context has d_x={x.shape[1]} but the model was built for d_x={model.config.d_x}")
    target_y = np.asarray(target_y).reshape(-1)
    if target_y.size < 1:
        raise InputValidationError("need at least one target value")
    h = model.encode(x[None], y.reshape(1, -1), target_y.reshape(1, -1, 1), rng)
    return h[0]


def elbo_loss(x, h, model: ExPTModel, rng: np.random.Generator) -> Tensor:
    """
    Single-sample negative ELBO of x given the hidden state h

    beta * KL(q(z | x, h) || N(0, I)) + ||x - decode(z, h)||^2 / (2 * recon_variance).
    Leading axes of x and h are kept (a scalar for 1-D inputs).
    """
    config = model.config
    x = model._cast(x)
    h = model._cast(h)
    if x.shape[-1] != config.d_x or h.shape[-1] != config.dim:
        raise ShapeError(f"elbo inputs x{x.shape} h{h.shape} do not match d_x={config.d_x}, D={config.dim}")
    stats = model.vae_encoder(concat([x, h], axis=-1))
    k = config.latent
    mu, logvar = stats[..., :k], stats[..., k:]
    z = reparameterize(mu, logvar, rng)
    diff = x - model.vae_decoder(concat([z, h], axis=-1))
    recon = (diff * diff).sum(axis=-1) * (0.5 / config.recon_variance)
    return kl_diag_gaussian(mu, logvar) * config.kl_weight + recon


def stack_episodes(episodes: Sequence[Episode]):
    if not episodes:
        raise InputValidationError("empty episode batch")
    shapes = {(e.context_x.shape, e.target_x.shape) for e in episodes}
    if len(shapes) != 1:
        raise ShapeError(f"episodes in one batch must share shapes, got {sorted(shapes)}")
    return (np.stack([e.context_x for e in episodes]), np.stack([e.context_y for e in episodes]),
            np.stack([e.target_x for e in episodes]), np.stack([e.target_y for e in episodes]))


def batch_pretrain_loss(episodes: Sequence[Episode], model: ExPTModel, rng: np.random.Generator) -> Tensor:
    """Mean negative ELBO over every target of every episode in the batch"""
    cx, cy, tx, ty = stack_episodes(episodes)
    h = model.encode(cx, cy, ty[..., None], rng)
    return elbo_loss(tx, h, model, rng).mean()


def pretrain_loss(episode: Episode, model: ExPTModel, rng: np.random.Generator) -> Tensor:
    return batch_pretrain_loss([episode], model, rng)


# --- pretraining loop ---------------------------------------------------------

@dataclass
class PretrainConfig:
    iterations: int = 10000
    batch_functions: int = 128
    checkpoint_every: int = 1000
    schedule: LrSchedule = field(default_factory=LrSchedule)
    beta1: float = 0.9
    beta2: float = 0.99
    eps: float = 1e-8
    weight_decay: float = 1e-2
    seed: int = 0
    workers: int = 1

    def __post_init__(self):
        if self.iterations < 0:
            raise ConfigError("must be >= 0", key='train.iterations')
        if self.batch_functions < 1:
            raise ConfigError("must be >= 1", key='train.batch_functions')
        if self.checkpoint_every < 1:
            raise ConfigError("must be >= 1", key='run.checkpoint_every')

    @property
    def total_functions(self) -> int:
        return self.iterations * self.batch_functions


@dataclass
class CheckpointSnapshot:
    step: int
    parameters: Dict[str, np.ndarray]
    optimizer: OptimizerState


@dataclass
class PretrainResult:
    checkpoints: List[CheckpointSnapshot]
    losses: List[float]
    functions_seen: int


def pretrain(train_config: PretrainConfig, generator_config: GeneratorConfig, model: InContextEncoder,
             rng: Optional[np.random.Generator] = None, pool: Optional[np.ndarray] = None,
             on_checkpoint: Optional[Callable[[CheckpointSnapshot], None]] = None,
             on_step: Optional[Callable[[int, float], None]] = None,
             keep_snapshots: bool = True) -> PretrainResult:
    """
    Train any in-context model on freshly sampled synthetic episodes

    Args:
        train_config: iterations, batch size, optimizer and schedule
        generator_config: synthetic function family
        model: ExPTModel or TnpEdModel (anything with batch_loss)
        rng: stream for dropout and latent noise (default: seeded from train_config.seed)
        pool: unlabeled designs for the pool input source
        on_checkpoint: called with every snapshot as it is taken
        on_step: called with (step, loss) after every update
        keep_snapshots: keep snapshots in the returned result

    Returns:
        PretrainResult with snapshots, per-step losses and the function count
    """
    if model.config.d_x != generator_config.dimension:
        raise ConfigError(f"model d_x={model.config.d_x} but generator dimension={generator_config.dimension}",
                          key='generator.dimension')
    seed = train_config.seed
    rng = rng if rng is not None else np.random.default_rng(seed)
    params = model.parameters()
    state = OptimizerState.for_parameters(params, lr=train_config.schedule.peak, beta1=train_config.beta1,
                                          beta2=train_config.beta2, eps=train_config.eps,
                                          weight_decay=train_config.weight_decay)
    snapshots: List[CheckpointSnapshot] = []
    losses: List[float] = []

    def take_snapshot(step: int) -> None:
        snapshot = CheckpointSnapshot(step, model.state_dict(), state.copy())
        if on_checkpoint is not None:
            on_checkpoint(snapshot)
        if keep_snapshots:
            snapshots.append(snapshot)

    model.train()
    if train_config.iterations == 0:
        take_snapshot(0)

    for iteration in range(train_config.iterations):
        try:
            episodes = draw_episode_batch(generator_config, pool, seed, iteration,
                                          train_config.batch_functions, train_config.workers)
            loss = model.batch_loss(episodes, rng)
            if not math.isfinite(loss.item()):
                raise NumericError("non-finite loss")
            grads = compute_gradients(loss, params)
        except NumericError as exc:
            raise NumericError(f"pretraining aborted at iteration {iteration} "
                               f"(generator seed {seed}, iteration {iteration}): {exc}") from exc
        adamw_step(params, grads, state, lr=lr_at(state.t, train_config.schedule))

        step = iteration + 1
        losses.append(loss.item())
        if on_step is not None:
            on_step(step, losses[-1])
        if step % train_config.checkpoint_every == 0 or step == train_config.iterations:
            take_snapshot(step)

    model.eval()
    return PretrainResult(snapshots, losses, train_config.total_functions)


# --- adaptation ---------------------------------------------------------------

def scale_adaptation_targets(context_y, y_star: float, match_scale: float = 1.0) -> Tuple[np.ndarray, float]:
    """z-score the few-shot y's, push y* through the same map, then multiply by match_scale"""
    y = np.asarray(context_y, dtype=np.float64).reshape(-1)
    mean = y.mean()
    std = max(float(y.std()), Y_STD_FLOOR)
    return (y - mean) / std * match_scale, float((y_star - mean) / std * match_scale)


def generate_candidates(few_shot, y_star: float, q: int, model: ExPTModel, rng: np.random.Generator,
                        box: Optional[Tuple[float, float]] = None, match_scale: float = 1.0) -> np.ndarray:
    """
    Propose Q designs conditioned on the few-shot set and the target value y*

    Args:
        few_shot: FewShotDataset, Episode or (x, y) pair
        y_star: desired objective value in the oracle's units
        q: number of candidates
        model: pretrained ExPT model
        rng: stream for the latent samples
        box: (lo, hi) domain bounds to clip to
        match_scale: multiplier applied after z-scoring

    Returns:
        [Q, d_x] float64 array
    """
    x, y = context_arrays(few_shot)
    if x.shape[0] < 1:
        raise InputValidationError("few-shot context is empty")
    if q < 1:
        raise InputValidationError(f"Q must be >= 1, got {q}")
    context_y, target = scale_adaptation_targets(y, y_star, match_scale)

    was_training = model.training
    model.eval()
    try:
        h = embed_and_encode((x, context_y), np.full(q, target), model)
        z = Tensor(rng.standard_normal((q, model.config.latent)).astype(model.dtype))
        candidates = model.vae_decoder(concat([z, h], axis=-1)).data.astype(np.float64)
    finally:
        model.train(was_training)

    if box is not None:
        candidates = np.clip(candidates, box[0], box[1])
    if not np.all(np.isfinite(candidates)):
        raise NumericError("candidate generation produced non-finite coordinates")
    return candidates
