#!/usr/bin/env python3
"""
Forward-modeling baselines

TNP-ED is an in-context forward model (x -> y) pretrained on the same
synthetic episodes as ExPT and adapted by gradient ascent on its inputs.
The surrogate family fits small MLP ensembles to the few-shot data and
ascends the single, min or mean prediction.
"""

from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from .errors import ConfigError, InputValidationError
from .model import ExPTConfig, InContextEncoder, context_arrays, stack_episodes, scale_adaptation_targets
from .nncore import Linear, MLP, OptimizerState, Tensor, adamw_step, compute_gradients, stack
from .synthfn import Episode

REDUCE_MODES = ('single', 'min', 'mean')

# few-shot coordinates with a smaller spread ascend at unit scale
INPUT_SCALE_FLOOR = 1e-6


class TnpEdModel(InContextEncoder):
    """Same encoder as ExPT, but targets are x's and a linear head predicts y"""

    kind = 'tnp-ed'

    def __init__(self, config: ExPTConfig, rng: np.random.Generator, dtype=None):
        super().__init__(config, config.d_x, rng, dtype)
        self.head = Linear(config.dim, 1, rng, dtype)

    def predict(self, context_x, context_y, target_x, rng: Optional[np.random.Generator] = None) -> Tensor:
        """Predicted y for every target x, shape [B, T]"""
        h = self.encode(context_x, context_y, target_x, rng)
        out = self.head(h)
        return out.reshape(out.shape[:-1])

    def batch_loss(self, episodes: Sequence[Episode], rng: np.random.Generator) -> Tensor:
        cx, cy, tx, ty = stack_episodes(episodes)
        diff = self.predict(cx, cy, tx, rng) - self._cast(ty)
        return (diff * diff).mean()


def tnp_ed_loss(episode: Episode, model: TnpEdModel, rng: np.random.Generator) -> Tensor:
    """Mean squared prediction error over the targets of one episode"""
    return model.batch_loss([episode], rng)


def ascend(objective: Callable[[Tensor], Tensor], x0: np.ndarray, steps: int, step_size: float,
           box: Optional[Tuple[float, float]] = None, dtype=np.float64,
           input_scale: Optional[np.ndarray] = None) -> np.ndarray:
    """
    Clipped gradient ascent x <- clip(x + step_size * s^2 * d objective / dx)

    Args:
        objective: maps a [Q, d] Tensor to per-row values [Q]
        x0: [Q, d] starting points (returned unchanged when steps == 0)
        steps: number of updates
        step_size: ascent rate
        box: (lo, hi) bounds applied after every update
        input_scale: per-coordinate scale s; the update is plain ascent on
            x / s. None means s = 1

    Returns:
        [Q, d] float64 array
    """
    x = np.array(x0, dtype=np.float64, copy=True)
    rate = step_size if input_scale is None else step_size * np.square(np.asarray(input_scale, dtype=np.float64))
    for _ in range(steps):
        xt = Tensor(x.astype(dtype), requires_grad=True)
        (grad,) = compute_gradients(objective(xt).sum(), [xt])
        x = x + rate * grad.astype(np.float64)
        if box is not None:
            x = np.clip(x, box[0], box[1])
    return x


def top_q_designs(x: np.ndarray, y: np.ndarray, q: int) -> np.ndarray:
    """The Q best few-shot designs by y, cycled when fewer than Q exist"""
    if x.shape[0] < 1:
        raise InputValidationError("few-shot set is empty")
    order = np.argsort(-np.asarray(y), kind='stable')
    return np.asarray(x, dtype=np.float64)[order[np.arange(q) % len(order)]]


def few_shot_input_scale(x: np.ndarray) -> np.ndarray:
    """Per-coordinate std of the few-shot designs; coordinates that do not vary get 1"""
    std = np.asarray(x, dtype=np.float64).std(axis=0)
    return np.where(std > INPUT_SCALE_FLOOR, std, 1.0)


def tnp_ed_objective(few_shot, model: TnpEdModel) -> Callable[[Tensor], Tensor]:
    """Predicted (z-scored) y of the frozen forward model at [Q, d] designs, with few_shot as context"""
    x, y = context_arrays(few_shot)
    context_y, _ = scale_adaptation_targets(y, float(np.max(y)))
    model.eval()

    def objective(xt: Tensor) -> Tensor:
        return model.predict(x[None], context_y[None], xt.reshape((1,) + xt.shape))[0]

    return objective


def tnp_ed_optimize(few_shot, model: TnpEdModel, steps: int = 200, step_size: float = 0.1, q: int = 256,
                    box: Optional[Tuple[float, float]] = None) -> np.ndarray:
    """
    Gradient ascent on the inputs of the frozen forward model, with few_shot as context

    Starts from the top-Q few-shot designs and ascends in coordinates
    standardized by the few-shot input spread.
    """
    x, y = context_arrays(few_shot)
    init = top_q_designs(x, y, q)
    return ascend(tnp_ed_objective(few_shot, model), init, steps, step_size, box, dtype=model.dtype,
                  input_scale=few_shot_input_scale(x))


# --- surrogate ensembles ------------------------------------------------------

@dataclass
class EnsembleConfig:
    size: int = 5
    hidden: int = 256
    layers: int = 2
    epochs: int = 500
    lr: float = 1e-3
    weight_decay: float = 1e-2
    reduce_mode: str = 'mean'

    def __post_init__(self):
        if self.size < 1:
            raise ConfigError("ensemble needs at least one member", key='baselines.ensemble.size')
        if self.reduce_mode not in REDUCE_MODES:
            raise ConfigError(f"unknown reduce mode '{self.reduce_mode}'", key='baselines.ensemble.reduce_mode')
        if self.reduce_mode == 'single' and self.size != 1:
            raise ConfigError("single reduce mode requires exactly one member", key='baselines.ensemble.size')

    @classmethod
    def for_method(cls, method: str, **overrides) -> 'EnsembleConfig':
        """grad-asc -> one member; grad-min / grad-mean -> ensemble reduced by min / mean"""
        mode = {'grad-asc': 'single', 'grad-min': 'min', 'grad-mean': 'mean'}[method]
        if mode == 'single':
            overrides['size'] = 1
        return cls(reduce_mode=mode, **overrides)


class SurrogateEnsemble:
    """Forward MLPs trained on standardized few-shot data"""

    def __init__(self, members: List[MLP], reduce_mode: str, x_mean: np.ndarray, x_std: np.ndarray,
                 y_mean: float, y_std: float, losses: Optional[List[float]] = None):
        if not members:
            raise ConfigError("ensemble needs at least one member", key='baselines.ensemble.size')
        if reduce_mode == 'single' and len(members) != 1:
            raise ConfigError("single reduce mode requires exactly one member", key='baselines.ensemble.size')
        self.members = members
        self.reduce_mode = reduce_mode
        self.x_mean = x_mean
        self.x_std = x_std
        self.y_mean = y_mean
        self.y_std = y_std
        self.losses = losses or []

    def member_predictions(self, x: Tensor) -> List[Tensor]:
        scaled = (x - self.x_mean) / self.x_std
        outputs = []
        for member in self.members:
            out = member(scaled)
            outputs.append(out.reshape(out.shape[:-1]) * self.y_std + self.y_mean)
        return outputs

    def objective(self, x: Tensor) -> Tensor:
        predictions = self.member_predictions(x)
        if self.reduce_mode == 'single':
            return predictions[0]
        if self.reduce_mode == 'min':
            return stack(predictions, axis=0).min(axis=0)
        return stack(predictions, axis=0).mean(axis=0)

    def predict(self, x: np.ndarray) -> np.ndarray:
        return self.objective(Tensor(np.asarray(x, dtype=np.float64))).data


def surrogate_train(few_shot, ensemble_config: EnsembleConfig, rng: np.random.Generator,
                    verbose: bool = True) -> SurrogateEnsemble:
    """
    Fit every ensemble member on all few-shot pairs

    Args:
        few_shot: FewShotDataset or (x, y) pair with at least 2 points
        ensemble_config: architecture and optimization settings
        rng: seeds the members (each gets its own initialization)
        verbose: print the degenerate-dataset warning

    Returns:
        Trained SurrogateEnsemble (final training loss per member in .losses)
    """
    x, y = context_arrays(few_shot)
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if x.shape[0] < 2:
        raise InputValidationError(f"surrogate training needs at least 2 points, got {x.shape[0]}")
    if np.ptp(y) == 0 and verbose:
        print(f"  ⚠️  Degenerate few-shot dataset: all {len(y)} y values equal {y[0]:.6g}")

    x_mean, x_std = x.mean(axis=0), np.maximum(x.std(axis=0), 1e-6)
    y_mean, y_std = float(y.mean()), max(float(y.std()), 1e-6)
    inputs = Tensor((x - x_mean) / x_std)
    targets = Tensor((y - y_mean) / y_std)

    members, losses = [], []
    cfg = ensemble_config
    for _ in range(cfg.size):
        member_rng = np.random.default_rng(int(rng.integers(2 ** 31)))
        net = MLP([x.shape[1]] + [cfg.hidden] * cfg.layers + [1], member_rng, activation='tanh',
                  dtype=np.float64)
        # zero head: the fit starts from the mean prediction
        net.layers[-1].weight.data[:] = 0.0
        net.layers[-1].bias.data[:] = 0.0
        params = net.parameters()
        state = OptimizerState.for_parameters(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
        loss = None
        for _ in range(cfg.epochs):
            out = net(inputs)
            diff = out.reshape(out.shape[:-1]) - targets
            loss = (diff * diff).mean()
            adamw_step(params, compute_gradients(loss, params), state)
        members.append(net.eval())
        losses.append(loss.item() if loss is not None else float('nan'))
    return SurrogateEnsemble(members, cfg.reduce_mode, x_mean, x_std, y_mean, y_std, losses)


def grad_ascent_optimize(ensemble: SurrogateEnsemble, few_shot, steps: int = 200, step_size: float = 1e-2,
                         q: int = 256, box: Optional[Tuple[float, float]] = None) -> np.ndarray:
    """Ascend the reduced ensemble prediction from the top-Q few-shot designs"""
    x, y = context_arrays(few_shot)
    return ascend(ensemble.objective, top_q_designs(x, y, q), steps, step_size, box)
