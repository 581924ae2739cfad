#!/usr/bin/env python3
"""
Minimal differentiable-computation substrate

Dense numpy arrays with reverse-mode gradients, the layer primitives the
ExPT encoder-decoder needs, the AdamW optimizer and the warmup-cosine
learning-rate schedule. Only the operations the models use are provided.
"""

import math
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from .errors import MaskError, NumericError, ShapeError

DTYPES = {'float32': np.float32, 'float64': np.float64}

# Added to disallowed attention logits; exp() of it underflows to exactly 0.
MASK_FILL = -1e9

_default_dtype = np.float32


def set_default_dtype(name: str) -> None:
    """Select 'float32' (training) or 'float64' (verification) for new tensors"""
    global _default_dtype
    if name not in DTYPES:
        raise ValueError(f"Unknown precision '{name}', expected one of {sorted(DTYPES)}")
    _default_dtype = DTYPES[name]


def get_default_dtype():
    return _default_dtype


@contextmanager
def precision(name: str) -> Iterator[None]:
    """Temporarily switch the default tensor precision"""
    previous = _default_dtype
    set_default_dtype(name)
    try:
        yield
    finally:
        globals()['_default_dtype'] = previous


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to the operand's shape"""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _is_basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (slice, int, type(Ellipsis), type(None))) for i in items)


class Tensor:
    """n-dimensional array node in a reverse-mode computation graph"""

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None,
                 _parents: Tuple['Tensor', ...] = (), _op: str = 'leaf'):
        array = np.asarray(data)
        if array.dtype not in (np.float32, np.float64):
            array = array.astype(_default_dtype)
        self.data = array
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._parents = _parents
        self._op = _op
        self._backward: Optional[Callable[[], None]] = None

    # --- graph plumbing -------------------------------------------------

    @staticmethod
    def _result(data: np.ndarray, parents: Sequence['Tensor'], op: str,
                backward: Callable[[np.ndarray], None]) -> 'Tensor':
        data = np.asarray(data)
        if not np.all(np.isfinite(data)):
            raise NumericError(f"non-finite value produced by '{op}'")
        needs_grad = any(p.requires_grad for p in parents)
        out = Tensor(data, requires_grad=needs_grad,
                     _parents=tuple(parents) if needs_grad else (), _op=op)
        if needs_grad:
            out._backward = lambda: backward(out.grad)
        return out

    def _lift(self, other) -> 'Tensor':
        if isinstance(other, Tensor):
            return other
        return Tensor(np.asarray(other, dtype=self.data.dtype))

    def _accumulate(self, grad: np.ndarray) -> None:
        if not self.requires_grad:
            return
        grad = _unbroadcast(grad, self.data.shape)
        if self.grad is None:
            self.grad = np.array(grad, dtype=self.data.dtype, copy=True)
        else:
            self.grad = self.grad + grad

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def backward(self) -> None:
        compute_gradients(self)

    def __repr__(self) -> str:
        label = f", name={self.name}" if self.name else ""
        return f"Tensor(shape={self.data.shape}, op={self._op}{label})"

    # --- elementwise arithmetic ----------------------------------------

    def __add__(self, other) -> 'Tensor':
        other = self._lift(other)

        def backward(g):
            self._accumulate(g)
            other._accumulate(g)
        return Tensor._result(self.data + other.data, (self, other), 'add', backward)

    __radd__ = __add__

    def __neg__(self) -> 'Tensor':
        return Tensor._result(-self.data, (self,), 'neg', lambda g: self._accumulate(-g))

    def __sub__(self, other) -> 'Tensor':
        other = self._lift(other)

        def backward(g):
            self._accumulate(g)
            other._accumulate(-g)
        return Tensor._result(self.data - other.data, (self, other), 'sub', backward)

    def __rsub__(self, other) -> 'Tensor':
        return self._lift(other) - self

    def __mul__(self, other) -> 'Tensor':
        other = self._lift(other)

        def backward(g):
            self._accumulate(g * other.data)
            other._accumulate(g * self.data)
        return Tensor._result(self.data * other.data, (self, other), 'mul', backward)

    __rmul__ = __mul__

    def __truediv__(self, other) -> 'Tensor':
        other = self._lift(other)

        def backward(g):
            self._accumulate(g / other.data)
            other._accumulate(-g * self.data / (other.data * other.data))
        return Tensor._result(self.data / other.data, (self, other), 'div', backward)

    def __rtruediv__(self, other) -> 'Tensor':
        return self._lift(other) / self

    def __pow__(self, exponent: float) -> 'Tensor':
        def backward(g):
            self._accumulate(g * exponent * self.data ** (exponent - 1))
        return Tensor._result(self.data ** exponent, (self,), 'pow', backward)

    def __matmul__(self, other) -> 'Tensor':
        other = self._lift(other)
        if self.data.ndim < 2 or other.data.ndim < 2:
            raise ShapeError("matmul operands must be at least 2-D")
        if self.data.shape[-1] != other.data.shape[-2]:
            raise ShapeError(f"matmul shape mismatch {self.data.shape} @ {other.data.shape}")

        def backward(g):
            self._accumulate(g @ np.swapaxes(other.data, -1, -2))
            other._accumulate(np.swapaxes(self.data, -1, -2) @ g)
        return Tensor._result(self.data @ other.data, (self, other), 'matmul', backward)

    # --- reductions and shape ops ---------------------------------------

    def sum(self, axis=None, keepdims: bool = False) -> 'Tensor':
        def backward(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            self._accumulate(np.broadcast_to(g, self.data.shape))
        return Tensor._result(self.data.sum(axis=axis, keepdims=keepdims), (self,), 'sum', backward)

    def mean(self, axis=None, keepdims: bool = False) -> 'Tensor':
        if axis is None:
            count = self.data.size
        else:
            axes = axis if isinstance(axis, tuple) else (axis,)
            count = int(np.prod([self.data.shape[a] for a in axes]))
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    def min(self, axis: int) -> 'Tensor':
        """Minimum along one axis; the gradient goes to the first minimizer"""
        index = np.expand_dims(np.argmin(self.data, axis=axis), axis)

        def backward(g):
            full = np.zeros_like(self.data)
            np.put_along_axis(full, index, np.expand_dims(g, axis), axis=axis)
            self._accumulate(full)
        out = np.take_along_axis(self.data, index, axis=axis).squeeze(axis)
        return Tensor._result(out, (self,), 'min', backward)

    def reshape(self, shape: Tuple[int, ...]) -> 'Tensor':
        return Tensor._result(self.data.reshape(shape), (self,), 'reshape',
                              lambda g: self._accumulate(g.reshape(self.data.shape)))

    def transpose(self, axes: Tuple[int, ...]) -> 'Tensor':
        inverse = tuple(np.argsort(axes))
        return Tensor._result(self.data.transpose(axes), (self,), 'transpose',
                              lambda g: self._accumulate(g.transpose(inverse)))

    def __getitem__(self, index) -> 'Tensor':
        def backward(g):
            full = np.zeros_like(self.data)
            if _is_basic_index(index):
                full[index] = g
            else:
                np.add.at(full, index, g)
            self._accumulate(full)
        return Tensor._result(self.data[index], (self,), 'getitem', backward)

    # --- nonlinearities ---------------------------------------------------

    def exp(self) -> 'Tensor':
        out = np.exp(self.data)
        return Tensor._result(out, (self,), 'exp', lambda g: self._accumulate(g * out))

    def log(self) -> 'Tensor':
        return Tensor._result(np.log(self.data), (self,), 'log',
                              lambda g: self._accumulate(g / self.data))

    def tanh(self) -> 'Tensor':
        out = np.tanh(self.data)
        return Tensor._result(out, (self,), 'tanh',
                              lambda g: self._accumulate(g * (1.0 - out * out)))

    def gelu(self) -> 'Tensor':
        """GELU, tanh approximation"""
        x = self.data
        c = math.sqrt(2.0 / math.pi)
        inner = c * (x + 0.044715 * x ** 3)
        t = np.tanh(inner)

        def backward(g):
            d_inner = c * (1.0 + 3 * 0.044715 * x * x)
            local = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * d_inner
            self._accumulate(g * local)
        return Tensor._result(0.5 * x * (1.0 + t), (self,), 'gelu', backward)

    def softmax(self, axis: int = -1) -> 'Tensor':
        shifted = self.data - self.data.max(axis=axis, keepdims=True)
        e = np.exp(shifted)
        out = e / e.sum(axis=axis, keepdims=True)

        def backward(g):
            self._accumulate(out * (g - (g * out).sum(axis=axis, keepdims=True)))
        return Tensor._result(out, (self,), 'softmax', backward)


def as_tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    if isinstance(data, Tensor):
        return data
    return Tensor(np.asarray(data, dtype=_default_dtype if dtype is None else dtype), requires_grad=requires_grad)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            t._accumulate(piece)
    return Tensor._result(np.concatenate([t.data for t in tensors], axis=axis),
                          tuple(tensors), 'concat', backward)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    def backward(g):
        for i, t in enumerate(tensors):
            t._accumulate(np.take(g, i, axis=axis))
    return Tensor._result(np.stack([t.data for t in tensors], axis=axis),
                          tuple(tensors), 'stack', backward)


def layer_norm_core(x: Tensor, eps: float = 1e-5) -> Tensor:
    """(x - mean) / sqrt(var + eps) over the last axis"""
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    inv_std = 1.0 / np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + eps)
    xhat = centered * inv_std

    def backward(g):
        g_mean = g.mean(axis=-1, keepdims=True)
        gx_mean = (g * xhat).mean(axis=-1, keepdims=True)
        x._accumulate(inv_std * (g - g_mean - xhat * gx_mean))
    return Tensor._result(xhat, (x,), 'layer_norm', backward)


def dropout(x: Tensor, rate: float, rng: Optional[np.random.Generator], training: bool) -> Tensor:
    if not training or rate <= 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode needs an rng")
    keep = (rng.random(x.data.shape) >= rate).astype(x.data.dtype) / (1.0 - rate)
    return x * Tensor(keep)


def _topological_order(root: Tensor) -> List[Tensor]:
    order: List[Tensor] = []
    visited = set()
    stack_ = [(root, False)]
    while stack_:
        node, expanded = stack_.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack_.append((node, True))
        for parent in node._parents:
            if id(parent) not in visited:
                stack_.append((parent, False))
    return order


def compute_gradients(loss: Tensor, parameters: Optional[Sequence[Tensor]] = None) -> List[np.ndarray]:
    """
    Reverse-mode accumulation of d(loss)/d(leaf) for every leaf in the graph

    Args:
        loss: scalar Tensor
        parameters: optional leaves to reset first and return gradients for

    Returns:
        Gradients for `parameters` in order (zeros for leaves off the loss path)
    """
    if loss.data.size != 1:
        raise ShapeError(f"loss must be a scalar, got shape {loss.data.shape}")
    if parameters is not None:
        for p in parameters:
            p.grad = None

    order = _topological_order(loss)
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is None or node.grad is None:
            continue
        if not np.all(np.isfinite(node.grad)):
            label = f" ({node.name})" if node.name else ""
            raise NumericError(f"non-finite gradient at node '{node._op}'{label}")
        node._backward()
        node.grad = None

    if parameters is None:
        return []
    grads = []
    for p in parameters:
        if p.grad is None:
            p.grad = np.zeros_like(p.data)
        elif not np.all(np.isfinite(p.grad)):
            raise NumericError(f"non-finite gradient at parameter '{p.name}'")
        grads.append(p.grad)
    return grads


# --- modules ----------------------------------------------------------------

class Parameter(Tensor):
    """Trainable leaf tensor"""

    def __init__(self, data, name: Optional[str] = None):
        super().__init__(data, requires_grad=True, name=name)


class Module:
    """Container of parameters and sub-modules, walked in attribute order"""

    def __init__(self):
        self.training = True

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def _children(self) -> Iterator[Tuple[str, object]]:
        for key, value in vars(self).items():
            if isinstance(value, (Parameter, Module)):
                yield key, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, (Parameter, Module)):
                        yield f"{key}.{i}", item

    def named_parameters(self, prefix: str = '') -> Iterator[Tuple[str, Parameter]]:
        for key, value in self._children():
            if isinstance(value, Parameter):
                if value.name is None:
                    value.name = prefix + key
                yield prefix + key, value
            else:
                yield from value.named_parameters(prefix + key + '.')

    def parameters(self) -> List[Parameter]:
        return [p for _, p in self.named_parameters()]

    def modules(self) -> Iterator['Module']:
        yield self
        for _, value in self._children():
            if isinstance(value, Module):
                yield from value.modules()

    def train(self, mode: bool = True) -> 'Module':
        for module in self.modules():
            module.training = mode
        return self

    def eval(self) -> 'Module':
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: Dict[str, np.ndarray], strict: bool = True) -> None:
        own = dict(self.named_parameters())
        if strict:
            missing = sorted(set(own) - set(state))
            unexpected = sorted(set(state) - set(own))
            if missing or unexpected:
                raise ShapeError(f"state dict mismatch: missing={missing} unexpected={unexpected}")
        for name, value in state.items():
            if name not in own:
                continue
            if own[name].data.shape != value.shape:
                raise ShapeError(f"{name}: shape {value.shape} != {own[name].data.shape}")
            own[name].data = np.array(value, copy=True)

    def astype(self, dtype) -> 'Module':
        dtype = DTYPES.get(dtype, dtype)
        for p in self.parameters():
            p.data = p.data.astype(dtype)
        return self

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters())

    @property
    def dtype(self):
        params = self.parameters()
        return params[0].data.dtype if params else _default_dtype


class Linear(Module):
    """x @ W + b with W of shape [in, out]"""

    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator, dtype=None):
        super().__init__()
        dtype = _default_dtype if dtype is None else dtype
        bound = 1.0 / math.sqrt(in_features)
        self.weight = Parameter(rng.uniform(-bound, bound, (in_features, out_features)).astype(dtype))
        self.bias = Parameter(rng.uniform(-bound, bound, (out_features,)).astype(dtype))

    def forward(self, x: Tensor) -> Tensor:
        return x @ self.weight + self.bias


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5, dtype=None):
        super().__init__()
        dtype = _default_dtype if dtype is None else dtype
        self.eps = eps
        self.gain = Parameter(np.ones(dim, dtype=dtype))
        self.shift = Parameter(np.zeros(dim, dtype=dtype))

    def forward(self, x: Tensor) -> Tensor:
        return layer_norm_core(x, self.eps) * self.gain + self.shift


ACTIVATIONS = {
    'gelu': Tensor.gelu,
    'tanh': Tensor.tanh,
}


class MLP(Module):
    """Stack of Linear layers with an activation between them (none after the last)"""

    def __init__(self, sizes: Sequence[int], rng: np.random.Generator,
                 activation: str = 'gelu', dtype=None):
        super().__init__()
        if len(sizes) < 2:
            raise ShapeError("MLP needs at least input and output sizes")
        if activation not in ACTIVATIONS:
            raise ValueError(f"Unknown activation '{activation}'")
        self.activation = activation
        self.layers = [Linear(a, b, rng, dtype) for a, b in zip(sizes[:-1], sizes[1:])]

    def forward(self, x: Tensor) -> Tensor:
        act = ACTIVATIONS[self.activation]
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = act(x)
        return x


@dataclass
class AttentionMask:
    """allow[i, j] is True iff token i may attend token j"""
    allow: np.ndarray

    def __post_init__(self):
        allow = np.asarray(self.allow, dtype=bool)
        if allow.ndim != 2 or allow.shape[0] != allow.shape[1]:
            raise MaskError(f"attention mask must be square, got shape {allow.shape}")
        empty = np.flatnonzero(~allow.any(axis=1))
        if empty.size:
            raise MaskError(f"attention mask row {int(empty[0])} allows no token")
        if not allow.diagonal().all():
            raise MaskError("attention mask must let every token attend itself")
        self.allow = allow

    @property
    def size(self) -> int:
        return self.allow.shape[0]

    def bias(self, dtype=None) -> np.ndarray:
        return np.where(self.allow, 0.0, MASK_FILL).astype(_default_dtype if dtype is None else dtype)


class MultiHeadAttention(Module):
    def __init__(self, dim: int, heads: int, dropout_rate: float, rng: np.random.Generator, dtype=None):
        super().__init__()
        if dim % heads:
            raise ShapeError(f"model dim {dim} is not divisible by {heads} heads")
        self.heads = heads
        self.dropout_rate = dropout_rate
        self.query = Linear(dim, dim, rng, dtype)
        self.key = Linear(dim, dim, rng, dtype)
        self.value = Linear(dim, dim, rng, dtype)
        self.output = Linear(dim, dim, rng, dtype)

    def forward(self, x: Tensor, mask_bias: np.ndarray, rng: Optional[np.random.Generator] = None) -> Tensor:
        batch, n, dim = x.shape
        head_dim = dim // self.heads

        def split(t: Tensor) -> Tensor:
            return t.reshape((batch, n, self.heads, head_dim)).transpose((0, 2, 1, 3))

        q, k, v = split(self.query(x)), split(self.key(x)), split(self.value(x))
        scores = (q @ k.transpose((0, 1, 3, 2))) * (1.0 / math.sqrt(head_dim))
        weights = (scores + Tensor(mask_bias.astype(x.dtype))).softmax(axis=-1)
        weights = dropout(weights, self.dropout_rate, rng, self.training)
        merged = (weights @ v).transpose((0, 2, 1, 3)).reshape((batch, n, dim))
        return self.output(merged)


class FeedForward(Module):
    def __init__(self, dim: int, hidden: int, dropout_rate: float, rng: np.random.Generator, dtype=None):
        super().__init__()
        self.dropout_rate = dropout_rate
        self.expand = Linear(dim, hidden, rng, dtype)
        self.contract = Linear(hidden, dim, rng, dtype)

    def forward(self, x: Tensor, rng: Optional[np.random.Generator] = None) -> Tensor:
        out = self.contract(self.expand(x).gelu())
        return dropout(out, self.dropout_rate, rng, self.training)


class TransformerLayer(Module):
    """Pre-norm block: masked self-attention then GELU feedforward, both residual"""

    def __init__(self, dim: int, heads: int, ff_dim: int, dropout_rate: float,
                 rng: np.random.Generator, dtype=None):
        super().__init__()
        self.norm1 = LayerNorm(dim, dtype=dtype)
        self.attention = MultiHeadAttention(dim, heads, dropout_rate, rng, dtype)
        self.norm2 = LayerNorm(dim, dtype=dtype)
        self.feedforward = FeedForward(dim, ff_dim, dropout_rate, rng, dtype)

    def forward(self, x: Tensor, mask_bias: np.ndarray, rng: Optional[np.random.Generator] = None) -> Tensor:
        x = x + self.attention(self.norm1(x), mask_bias, rng)
        return x + self.feedforward(self.norm2(x), rng)


class TransformerEncoder(Module):
    def __init__(self, layers: int, dim: int, heads: int, ff_dim: int, dropout_rate: float,
                 rng: np.random.Generator, dtype=None):
        super().__init__()
        self.dim = dim
        self.heads = heads
        self.layers = [TransformerLayer(dim, heads, ff_dim, dropout_rate, rng, dtype) for _ in range(layers)]
        self.final_norm = LayerNorm(dim, dtype=dtype)

    def forward(self, x: Tensor, mask: AttentionMask, rng: Optional[np.random.Generator] = None) -> Tensor:
        bias = mask.bias(x.dtype)
        for layer in self.layers:
            x = layer(x, bias, rng)
        return self.final_norm(x)


def transformer_layer(tokens: Tensor, mask, layer: TransformerLayer,
                      rng: Optional[np.random.Generator] = None) -> Tensor:
    """
    Apply one transformer block to [N, D] or [B, N, D] tokens under a mask

    Output row i only depends on input rows j with mask.allow[i, j].
    """
    if not isinstance(mask, AttentionMask):
        mask = AttentionMask(np.asarray(mask, dtype=bool))
    tokens = as_tensor(tokens)
    squeeze = tokens.ndim == 2
    if squeeze:
        tokens = tokens.reshape((1,) + tokens.shape)
    n, dim = tokens.shape[1], tokens.shape[2]
    if mask.size != n:
        raise ShapeError(f"mask is {mask.size}x{mask.size} but there are {n} tokens")
    if dim % layer.attention.heads:
        raise ShapeError(f"token dim {dim} is not divisible by {layer.attention.heads} heads")
    out = layer(tokens, mask.bias(tokens.dtype), rng)
    return out.reshape(out.shape[1:]) if squeeze else out


# --- optimization -----------------------------------------------------------

@dataclass
class OptimizerState:
    """AdamW moments, step counter and hyperparameters"""
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.99
    eps: float = 1e-8
    weight_decay: float = 1e-2
    t: int = 0
    m: List[np.ndarray] = field(default_factory=list)
    v: List[np.ndarray] = field(default_factory=list)

    @classmethod
    def for_parameters(cls, parameters: Sequence[Tensor], **hyperparameters) -> 'OptimizerState':
        state = cls(**hyperparameters)
        state.m = [np.zeros_like(p.data) for p in parameters]
        state.v = [np.zeros_like(p.data) for p in parameters]
        return state

    def copy(self) -> 'OptimizerState':
        return OptimizerState(self.lr, self.beta1, self.beta2, self.eps, self.weight_decay, self.t,
                              [m.copy() for m in self.m], [v.copy() for v in self.v])


def adamw_step(params: Sequence[Tensor], grads: Sequence[np.ndarray], state: OptimizerState,
               lr: Optional[float] = None) -> Tuple[Sequence[Tensor], OptimizerState]:
    """
    One decoupled-weight-decay Adam update, applied in place

    Args:
        params: parameter tensors
        grads: gradients, same order and shapes
        state: optimizer state (moments are created on first use)
        lr: learning rate for this step (defaults to state.lr)

    Returns:
        (params, state)
    """
    lr = state.lr if lr is None else lr
    if len(params) != len(grads):
        raise ShapeError(f"{len(params)} parameters but {len(grads)} gradients")
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    if len(state.m) != len(params):
        raise ShapeError("optimizer state does not match the parameter list")

    state.t += 1
    bias1 = 1.0 - state.beta1 ** state.t
    bias2 = 1.0 - state.beta2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g.shape != p.data.shape or m.shape != p.data.shape:
            raise ShapeError(f"gradient shape {g.shape} != parameter shape {p.data.shape}")
        p.data *= (1.0 - lr * state.weight_decay)
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p.data -= lr * (m / bias1) / (np.sqrt(v / bias2) + state.eps)
    return params, state


@dataclass(frozen=True)
class LrSchedule:
    peak: float = 5e-4
    warmup: int = 1000
    anneal: int = 9000


def lr_at(step: int, schedule: LrSchedule = LrSchedule()) -> float:
    """Linear warmup to the peak, cosine annealing to zero, zero afterwards"""
    if step < 0:
        raise ValueError(f"step must be non-negative, got {step}")
    if step < schedule.warmup:
        return schedule.peak * step / schedule.warmup
    if step <= schedule.warmup + schedule.anneal:
        if schedule.anneal == 0:
            return schedule.peak
        progress = (step - schedule.warmup) / schedule.anneal
        return schedule.peak * 0.5 * (1.0 + math.cos(math.pi * progress))
    return 0.0


# --- variational helpers ----------------------------------------------------

def kl_diag_gaussian(mu, logvar) -> Tensor:
    """KL(N(mu, diag(exp(logvar))) || N(0, I)), summed over the last axis"""
    mu, logvar = as_tensor(mu), as_tensor(logvar)
    return ((mu * mu + logvar.exp() - 1.0 - logvar) * 0.5).sum(axis=-1)


def reparameterize(mu, logvar, rng: np.random.Generator) -> Tensor:
    """z = mu + exp(logvar / 2) * eps, eps ~ N(0, I)"""
    mu, logvar = as_tensor(mu), as_tensor(logvar)
    if mu.shape != logvar.shape:
        raise ShapeError(f"mu shape {mu.shape} != logvar shape {logvar.shape}")
    eps = Tensor(rng.standard_normal(mu.shape).astype(mu.dtype))
    return mu + (logvar * 0.5).exp() * eps


def gradient_check(loss_fn: Callable[[], Tensor], parameters: Sequence[Tensor], h: float = 1e-5,
                   max_entries: Optional[int] = None, rng: Optional[np.random.Generator] = None,
                   floor: float = 1e-3) -> float:
    """
    Compare analytic gradients against central finite differences

    loss_fn must be deterministic (re-seed any rng inside it). Returns the
    largest elementwise |analytic - numeric| / max(|analytic|, |numeric|, floor).
    """
    analytic = [g.copy() for g in compute_gradients(loss_fn(), parameters)]
    rng = rng or np.random.default_rng(0)
    worst = 0.0
    for p, grad in zip(parameters, analytic):
        size = p.data.size
        if max_entries is not None and size > max_entries:
            entries = rng.choice(size, max_entries, replace=False)
        else:
            entries = range(size)
        for i in entries:
            original = p.data.flat[i]
            p.data.flat[i] = original + h
            plus = loss_fn().item()
            p.data.flat[i] = original - h
            minus = loss_fn().item()
            p.data.flat[i] = original
            numeric = (plus - minus) / (2 * h)
            exact = float(grad.flat[i])
            worst = max(worst, abs(exact - numeric) / max(abs(exact), abs(numeric), floor))
    return worst
