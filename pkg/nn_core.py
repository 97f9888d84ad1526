"""
Deterministic numeric kernel for the RingFormer toolkit.

A small reverse-mode autodiff Tensor on top of numpy, the Transformer
sub-layer primitives (attention, feedforward, layer norm, GELU, sinusoidal
positions), the training loss, Adam, the cosine warm-up schedule, global-norm
clipping and a central finite-difference oracle for gradient tests.

float32 is the training default, float64 the test dtype. All work is
single-threaded numpy; identical inputs give bit-identical outputs.
"""
from __future__ import annotations

import logging
import math
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf

logger = logging.getLogger(__name__)


# ============ ERRORS ============

class RingFormerError(Exception):
    """Base class for every error raised by the toolkit."""


class DimensionError(RingFormerError, ValueError):
    """Tensor extents do not agree."""


class ConfigurationError(RingFormerError, ValueError):
    """Invalid model, task, training or analysis configuration."""


class NumericError(RingFormerError, ArithmeticError):
    """Non-finite values where finite ones are required."""


class UndefinedError(RingFormerError, ArithmeticError):
    """The requested quantity is mathematically undefined for this input."""


# ============ DTYPES ============

DTYPES = {
    'f32': np.float32,
    'float32': np.float32,
    'f64': np.float64,
    'float64': np.float64,
}


def resolve_dtype(name):
    """Map 'f32' / 'float64' / numpy dtypes onto np.float32 or np.float64."""
    if isinstance(name, str):
        if name not in DTYPES:
            raise ConfigurationError(f"Unsupported dtype '{name}' (use f32 or f64)")
        return DTYPES[name]
    dtype = np.dtype(name)
    if dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ConfigurationError(f"Unsupported dtype {dtype} (use float32 or float64)")
    return dtype.type


# ============ RANDOM NUMBERS ============

def _state_to_json(obj):
    if isinstance(obj, dict):
        return {k: _state_to_json(v) for k, v in obj.items()}
    if isinstance(obj, np.ndarray):
        return {'__ndarray__': str(obj.dtype), 'values': [int(x) for x in obj.ravel()]}
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


def _state_from_json(obj):
    if isinstance(obj, dict):
        if '__ndarray__' in obj:
            return np.array(obj['values'], dtype=obj['__ndarray__'])
        return {k: _state_from_json(v) for k, v in obj.items()}
    return obj


class Rng:
    """
    Seeded random source backed by numpy's Philox4x64-10 counter-based
    bit generator. The same seed yields the same draw sequence on every
    platform, and the full generator state round-trips through JSON.
    """

    ALGORITHM = 'philox4x64-10'

    def __init__(self, seed=0):
        self.seed = int(seed) % (1 << 64)
        self._gen = np.random.Generator(np.random.Philox(self.seed))

    def normal(self, shape, std=1.0, dtype=np.float64):
        # Draw in f64 and cast, so f32 and f64 models share the same init
        return (self._gen.standard_normal(size=shape) * std).astype(dtype)

    def uniform(self, shape, low=0.0, high=1.0):
        return self._gen.uniform(low, high, size=shape)

    def integers(self, low, high, shape=None):
        return self._gen.integers(low, high, size=shape)

    def permutation(self, n):
        return self._gen.permutation(n)

    def bernoulli(self, shape, p):
        """Boolean mask with P(True) = p."""
        return self._gen.random(size=shape) < p

    def get_state(self):
        return {
            'algorithm': self.ALGORITHM,
            'seed': self.seed,
            'bit_generator': _state_to_json(self._gen.bit_generator.state),
        }

    def set_state(self, state):
        if state.get('algorithm') != self.ALGORITHM:
            raise ConfigurationError(f"Cannot restore rng state of algorithm {state.get('algorithm')!r}")
        self.seed = int(state['seed'])
        self._gen.bit_generator.state = _state_from_json(state['bit_generator'])

    @classmethod
    def from_state(cls, state):
        rng = cls(state.get('seed', 0))
        rng.set_state(state)
        return rng


# ============ AUTODIFF TENSOR ============

_GRAD_ENABLED = True


@contextmanager
def no_grad():
    """Disable graph recording (evaluation, tracing, finite differences)."""
    global _GRAD_ENABLED
    previous = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = previous


def _unbroadcast(grad, shape):
    """Sum a broadcast gradient back down to `shape`."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    """Dense float32/float64 array with an optional gradient slot."""

    def __init__(self, data, requires_grad=False, dtype=None, _ctx=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype) if dtype is not None else np.asarray(data)
        if arr.dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._ctx = _ctx

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    # --- array-like properties ---

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return int(self.data.size)

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    # --- graph ---

    def _topological_order(self):
        order, visited = [], set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            if node._ctx is not None:
                for parent in node._ctx.parents:
                    if parent.requires_grad and id(parent) not in visited:
                        stack.append((parent, False))
        return order

    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into the .grad of every leaf that requires grad."""
        if grad is None:
            if self.data.size != 1:
                raise DimensionError(f"backward() without an explicit gradient needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        pending = {id(self): np.asarray(grad, dtype=self.dtype)}
        for node in reversed(self._topological_order()):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            if node._ctx is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._ctx.parents, node._ctx.backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                pending[key] = pg if key not in pending else pending[key] + pg

    # --- operators ---

    def _lift(self, other):
        if isinstance(other, Tensor):
            return other
        return Tensor(np.asarray(other, dtype=self.dtype))

    def __add__(self, other):
        return Add.apply(self, self._lift(other))

    def __radd__(self, other):
        return Add.apply(self._lift(other), self)

    def __sub__(self, other):
        return Sub.apply(self, self._lift(other))

    def __rsub__(self, other):
        return Sub.apply(self._lift(other), self)

    def __mul__(self, other):
        return Mul.apply(self, self._lift(other))

    def __rmul__(self, other):
        return Mul.apply(self._lift(other), self)

    def __truediv__(self, other):
        return Div.apply(self, self._lift(other))

    def __neg__(self):
        return Neg.apply(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return Index.apply(self, index=index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return Reshape.apply(self, shape=shape)

    def swapaxes(self, axis1, axis2):
        return SwapAxes.apply(self, axis1=axis1, axis2=axis2)

    def sum(self, axis=None, keepdims=False):
        return Sum.apply(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        count = self.data.size if axis is None else np.prod([self.shape[a] for a in np.atleast_1d(axis)])
        return self.sum(axis=axis, keepdims=keepdims) / float(count)

    def exp(self):
        return Exp.apply(self)

    def log(self):
        return Log.apply(self)


class Parameter(Tensor):
    """
    Named, trainable tensor. `role` is one of weight, bias, norm, signal,
    embedding, head; `group` is the accounting component it belongs to.
    """

    def __init__(self, name, data, trainable=True, role='weight', group=None, dtype=None):
        super().__init__(data, requires_grad=trainable, dtype=dtype)
        self.name = name
        self.trainable = trainable
        self.role = role
        self.group = group or role

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape}, role={self.role})"


class Function:
    """One differentiable op; `apply` records it on the graph when needed."""

    def __init__(self, *parents):
        self.parents = parents

    @classmethod
    def apply(cls, *parents, **kwargs):
        ctx = cls(*parents)
        out = ctx.forward(*[p.data for p in parents], **kwargs)
        track = _GRAD_ENABLED and any(p.requires_grad for p in parents)
        return Tensor(out, requires_grad=track, _ctx=ctx if track else None)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def backward(self, grad):
        raise NotImplementedError


class Add(Function):
    def forward(self, a, b):
        self.shapes = (a.shape, b.shape)
        return a + b

    def backward(self, g):
        return _unbroadcast(g, self.shapes[0]), _unbroadcast(g, self.shapes[1])


class Sub(Function):
    def forward(self, a, b):
        self.shapes = (a.shape, b.shape)
        return a - b

    def backward(self, g):
        return _unbroadcast(g, self.shapes[0]), _unbroadcast(-g, self.shapes[1])


class Mul(Function):
    def forward(self, a, b):
        self.a, self.b = a, b
        return a * b

    def backward(self, g):
        return _unbroadcast(g * self.b, self.a.shape), _unbroadcast(g * self.a, self.b.shape)


class Div(Function):
    def forward(self, a, b):
        self.a, self.b = a, b
        return a / b

    def backward(self, g):
        ga = g / self.b
        gb = -g * self.a / (self.b * self.b)
        return _unbroadcast(ga, self.a.shape), _unbroadcast(gb, self.b.shape)


class Neg(Function):
    def forward(self, a):
        return -a

    def backward(self, g):
        return (-g,)


class MatMul(Function):
    def forward(self, a, b):
        self.a, self.b = a, b
        return np.matmul(a, b)

    def backward(self, g):
        ga = np.matmul(g, np.swapaxes(self.b, -1, -2))
        gb = np.matmul(np.swapaxes(self.a, -1, -2), g)
        return _unbroadcast(ga, self.a.shape), _unbroadcast(gb, self.b.shape)


class SwapAxes(Function):
    def forward(self, a, axis1, axis2):
        self.axes = (axis1, axis2)
        return np.swapaxes(a, axis1, axis2)

    def backward(self, g):
        return (np.swapaxes(g, *self.axes),)


class Reshape(Function):
    def forward(self, a, shape):
        self.in_shape = a.shape
        return np.reshape(a, shape)

    def backward(self, g):
        return (np.reshape(g, self.in_shape),)


class Sum(Function):
    def forward(self, a, axis=None, keepdims=False):
        self.in_shape, self.axis, self.keepdims = a.shape, axis, keepdims
        return np.sum(a, axis=axis, keepdims=keepdims)

    def backward(self, g):
        if self.axis is not None and not self.keepdims:
            g = np.expand_dims(g, self.axis)
        return (np.array(np.broadcast_to(g, self.in_shape)),)


class Exp(Function):
    def forward(self, a):
        self.out = np.exp(a)
        return self.out

    def backward(self, g):
        return (g * self.out,)


class Log(Function):
    def forward(self, a):
        self.a = a
        return np.log(a)

    def backward(self, g):
        return (g / self.a,)


class Index(Function):
    def forward(self, a, index):
        self.in_shape, self.index, self.dtype = a.shape, index, a.dtype
        return np.array(a[index])

    def backward(self, g):
        out = np.zeros(self.in_shape, dtype=self.dtype)
        np.add.at(out, self.index, g)
        return (out,)


class Concat(Function):
    def forward(self, *arrays, axis=0):
        self.axis = axis
        self.splits = np.cumsum([a.shape[axis] for a in arrays])[:-1]
        return np.concatenate(arrays, axis=axis)

    def backward(self, g):
        return tuple(np.split(g, self.splits, axis=self.axis))


class MaskedFill(Function):
    def forward(self, a, mask, value):
        self.in_shape, self.mask = a.shape, mask
        return np.where(mask, np.asarray(value, dtype=a.dtype), a)

    def backward(self, g):
        return (_unbroadcast(np.where(self.mask, 0, g), self.in_shape),)


class Softmax(Function):
    def forward(self, a, axis=-1):
        self.axis = axis
        shifted = a - np.max(a, axis=axis, keepdims=True)
        e = np.exp(shifted)
        self.out = e / np.sum(e, axis=axis, keepdims=True)
        return self.out

    def backward(self, g):
        y = self.out
        return (y * (g - np.sum(g * y, axis=self.axis, keepdims=True)),)


class LayerNormOp(Function):
    def forward(self, x, gamma, beta, eps=1e-5):
        self.x_shape, self.gamma = x.shape, gamma
        mu = np.mean(x, axis=-1, keepdims=True)
        xc = x - mu
        var = np.mean(xc * xc, axis=-1, keepdims=True)
        self.inv = 1.0 / np.sqrt(var + eps)
        self.xhat = xc * self.inv
        return self.xhat * gamma + beta

    def backward(self, g):
        d = self.x_shape[-1]
        flat_g = g.reshape(-1, d)
        flat_xhat = self.xhat.reshape(-1, d)
        g_gamma = np.sum(flat_g * flat_xhat, axis=0)
        g_beta = np.sum(flat_g, axis=0)
        gxhat = g * self.gamma
        gx = self.inv * (
            gxhat
            - np.mean(gxhat, axis=-1, keepdims=True)
            - self.xhat * np.mean(gxhat * self.xhat, axis=-1, keepdims=True)
        )
        return gx, g_gamma, g_beta


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


class Gelu(Function):
    def forward(self, x):
        self.x = x
        self.cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
        return x * self.cdf

    def backward(self, g):
        pdf = np.exp(-0.5 * self.x * self.x) * _INV_SQRT_2PI
        return (g * (self.cdf + self.x * pdf),)


class CrossEntropy(Function):
    def forward(self, logits, targets, ignore_index=None):
        n, vocab = logits.shape
        keep = np.ones(n, dtype=bool) if ignore_index is None else targets != ignore_index
        count = int(keep.sum())
        if count == 0:
            raise UndefinedError("cross_entropy: every position is ignored; the mean is undefined")
        safe = np.where(keep, targets, 0)
        if np.any((safe < 0) | (safe >= vocab)):
            raise DimensionError(f"cross_entropy: target index outside [0, {vocab})")
        shifted = logits - np.max(logits, axis=-1, keepdims=True)
        logp = shifted - np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))
        self.logp, self.safe, self.keep, self.count = logp, safe, keep, count
        picked = logp[np.arange(n), safe]
        return np.asarray(-np.sum(picked[keep]) / count, dtype=logits.dtype)

    def backward(self, g):
        n = self.logp.shape[0]
        grad = np.exp(self.logp)
        grad[np.arange(n), self.safe] -= 1.0
        grad *= (self.keep / self.count)[:, None].astype(grad.dtype)
        return (grad * g,)


# ============ PUBLIC OPS ============

def matmul(a, b):
    """a[..., m, k] · b[..., k, n] with broadcasting over leading extents."""
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs at least 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError as e:
        raise DimensionError(f"matmul batch extents do not broadcast: {a.shape} @ {b.shape}") from e
    return MatMul.apply(a, b)


def concat(tensors, axis=0):
    return Concat.apply(*tensors, axis=axis)


def embedding(weight, ids):
    """Row lookup weight[ids]; ids is an integer array."""
    return Index.apply(weight, index=np.asarray(ids))


def masked_fill(x, mask, value):
    return MaskedFill.apply(x, mask=np.asarray(mask, dtype=bool), value=value)


def softmax(x, axis=-1):
    """Max-shifted softmax along `axis`."""
    if not -x.ndim <= axis < x.ndim:
        raise DimensionError(f"softmax axis {axis} is out of range for shape {x.shape}")
    if x.shape[axis] == 0:
        raise DimensionError(f"softmax over an empty axis {axis} of shape {x.shape}")
    return Softmax.apply(x, axis=axis)


def layer_norm(x, gamma, beta, eps=1e-5):
    """Normalize every last-axis slice to zero mean / unit variance, then scale and shift."""
    d = x.shape[-1] if x.ndim else 0
    if d == 0:
        raise DimensionError(f"layer_norm needs a non-empty last axis, got shape {x.shape}")
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(f"layer_norm gamma/beta {gamma.shape}/{beta.shape} do not match last extent {d}")
    return LayerNormOp.apply(x, gamma, beta, eps=eps)


def gelu(x):
    """Exact GELU x·Φ(x) using the Gaussian CDF."""
    return Gelu.apply(x)


def _scaled_dot_product(q, k, v, mask=None, dropout=None):
    d = q.shape[-1]
    if d == 0:
        raise DimensionError("attention needs a positive head dimension")
    if k.shape[-1] != d or v.shape[-2] != k.shape[-2]:
        raise DimensionError(f"attention shapes disagree: q {q.shape}, k {k.shape}, v {v.shape}")
    scores = matmul(q, k.swapaxes(-1, -2)) / math.sqrt(d)
    dead_rows = None
    if mask is not None:
        allowed = np.asarray(mask, dtype=bool)
        dead_rows = ~allowed.any(axis=-1, keepdims=True)
        blocked = ~allowed & ~dead_rows
        scores = masked_fill(scores, blocked, -np.inf)
    probs = softmax(scores, axis=-1)
    if dead_rows is not None and dead_rows.any():
        # Fully masked query rows attend to nothing and output zeros
        probs = probs * Tensor((~dead_rows).astype(probs.dtype))
    mixed = dropout(probs) if dropout is not None else probs
    return matmul(mixed, v), probs


def attention(q, k, v, mask=None):
    """
    softmax(q·kᵀ / √d)·v for q[n_q×d], k[n_k×d], v[n_k×d_v].

    mask[i][j] is True where query i may attend key j; blocked entries get
    -inf logits. A query row with no allowed key outputs the zero vector.
    """
    out, _ = _scaled_dot_product(q, k, v, mask)
    return out


def split_heads(x, heads):
    *lead, n, hidden = x.shape
    return x.reshape(*lead, n, heads, hidden // heads).swapaxes(-3, -2)


def merge_heads(x):
    *lead, heads, n, d = x.shape
    return x.swapaxes(-3, -2).reshape(*lead, n, heads * d)


def multi_head_attention(x_q, x_kv, w_q, w_k, w_v, w_o, heads, mask=None, *,
                         b_q=None, b_k=None, b_v=None, b_o=None,
                         q_signal=None, k_signal=None, v_signal=None, signal_site='after',
                         dropout=None, trace=False):
    """
    Project, split into heads of width H/heads, attend per head, concatenate
    and apply the output projection.

    Optional per-projection signals are added after the projection
    (signal_site='after') or to the projection input ('before').

    Returns (output, probs) where probs is the [..., heads, n_q, n_k]
    probability array when tracing, else None.
    """
    hidden = w_q.shape[-1]
    if heads < 1 or hidden % heads:
        raise ConfigurationError(f"hidden size {hidden} is not divisible by {heads} heads")
    if x_q.shape[-1] != w_q.shape[0] or x_kv.shape[-1] != w_k.shape[0]:
        raise DimensionError(f"attention input {x_q.shape}/{x_kv.shape} does not match projections {w_q.shape}")

    def project(x, w, b, signal):
        if signal is not None and signal_site == 'before':
            x = x + signal
        y = matmul(x, w)
        if b is not None:
            y = y + b
        if signal is not None and signal_site == 'after':
            y = y + signal
        return y

    q = project(x_q, w_q, b_q, q_signal)
    k = project(x_kv, w_k, b_k, k_signal)
    v = project(x_kv, w_v, b_v, v_signal)
    out, probs = _scaled_dot_product(split_heads(q, heads), split_heads(k, heads), split_heads(v, heads),
                                     mask, dropout)
    y = matmul(merge_heads(out), w_o)
    if b_o is not None:
        y = y + b_o
    return y, (probs.data if trace else None)


def feed_forward(x, w_up, b_up, w_down, b_down, *, signal=None, signal_site='input'):
    """
    σ(x·W_up + b_up)·W_down + b_down with σ = GELU.

    A signal is added to the input ('input') or to the intermediate
    pre-activation ('inter').
    """
    if x.shape[-1] != w_up.shape[0] or w_up.shape[1] != w_down.shape[0] or w_down.shape[1] != x.shape[-1]:
        raise DimensionError(
            f"feed_forward shapes disagree: x {x.shape}, W_up {w_up.shape}, W_down {w_down.shape}")
    if signal is not None and signal_site == 'input':
        x = x + signal
    h = matmul(x, w_up)
    if b_up is not None:
        h = h + b_up
    if signal is not None and signal_site == 'inter':
        h = h + signal
    y = matmul(gelu(h), w_down)
    if b_down is not None:
        y = y + b_down
    return y


def sinusoidal_table(positions, d):
    """Rows of interleaved sin/cos encodings (frequency base 10000) for each position."""
    if d % 2:
        raise ConfigurationError(f"sinusoidal encoding needs an even width, got {d}")
    positions = np.asarray(positions, dtype=np.float64)
    if np.any(positions < 0):
        raise ConfigurationError("sinusoidal encoding index must be non-negative")
    freqs = 10000.0 ** (-np.arange(0, d, 2, dtype=np.float64) / d)
    angles = positions[..., None] * freqs
    table = np.empty(positions.shape + (d,), dtype=np.float64)
    table[..., 0::2] = np.sin(angles)
    table[..., 1::2] = np.cos(angles)
    return table


def sinusoidal_encoding(index, d):
    return Tensor(sinusoidal_table(index, d))


def cross_entropy(logits, targets, ignore_index=None):
    """Mean negative log-softmax probability of the targets over non-ignored positions."""
    targets = np.asarray(targets).reshape(-1)
    flat = logits.reshape(-1, logits.shape[-1])
    if flat.shape[0] != targets.shape[0]:
        raise DimensionError(f"cross_entropy: {flat.shape[0]} logit rows for {targets.shape[0]} targets")
    return CrossEntropy.apply(flat, targets=targets, ignore_index=ignore_index)


class Dropout:
    """Inverted dropout; identity unless active."""

    def __init__(self, rate, rng=None, active=False):
        self.rate = float(rate)
        self.rng = rng
        self.active = active and self.rate > 0.0

    def __call__(self, x):
        if not self.active:
            return x
        keep = 1.0 - self.rate
        mask = self.rng.bernoulli(x.shape, keep).astype(x.dtype) / np.asarray(keep, dtype=x.dtype)
        return x * Tensor(mask)


# ============ MODULES & PARAMETER INIT ============

class Module:
    """Container that collects the Parameters reachable from its attributes."""

    def named_parameters(self):
        seen, out = set(), []

        def visit(obj):
            if isinstance(obj, Parameter):
                if id(obj) not in seen:
                    seen.add(id(obj))
                    out.append(obj)
            elif isinstance(obj, Module):
                for value in vars(obj).values():
                    visit(value)
            elif isinstance(obj, (list, tuple)):
                for item in obj:
                    visit(item)

        visit(self)
        return out

    def parameters(self):
        return [p for p in self.named_parameters() if p.trainable]

    def zero_grad(self):
        for p in self.named_parameters():
            p.grad = None

    def state_dict(self):
        return {p.name: p.data for p in self.named_parameters()}

    def load_state_dict(self, state):
        for p in self.named_parameters():
            value = np.asarray(state[p.name])
            if value.shape != p.shape:
                raise DimensionError(f"{p.name}: expected shape {p.shape}, got {value.shape}")
            p.data = value.astype(p.dtype, copy=True)


class ParamFactory:
    """
    Creates named parameters with their initial values.

    With materialize=False every parameter is a zero-stride placeholder of
    the right shape, so counting full-size models costs no memory.
    """

    def __init__(self, rng=None, dtype=np.float32, materialize=True):
        self.rng = rng if rng is not None else Rng(0)
        self.dtype = resolve_dtype(dtype)
        self.materialize = materialize

    def _make(self, name, shape, role, group, init):
        shape = tuple(int(s) for s in shape)
        if self.materialize:
            data = init(shape)
        else:
            data = np.broadcast_to(np.zeros((), dtype=self.dtype), shape)
        return Parameter(name, data, role=role, group=group, dtype=self.dtype)

    def normal(self, name, shape, std, role='weight', group=None):
        return self._make(name, shape, role, group, lambda s: self.rng.normal(s, std, self.dtype))

    def zeros(self, name, shape, role='bias', group=None):
        return self._make(name, shape, role, group, lambda s: np.zeros(s, dtype=self.dtype))

    def ones(self, name, shape, role='norm', group=None):
        return self._make(name, shape, role, group, lambda s: np.ones(s, dtype=self.dtype))

    def weight(self, name, fan_in, fan_out, group):
        return self.normal(name, (fan_in, fan_out), fan_in ** -0.5, role='weight', group=group)

    def bias(self, name, n, group):
        return self.zeros(name, (n,), role='bias', group=group)


# ============ OPTIMIZATION ============

@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params, grads, state, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """Bias-corrected Adam update of every parameter with a gradient; mutates params and state."""
    for p, g in zip(params, grads):
        if g is not None and not np.all(np.isfinite(g)):
            raise NumericError(f"Non-finite gradient for '{p.name}'; Adam update rejected")
    state.step += 1
    t = state.step
    correction1 = 1.0 - beta1 ** t
    correction2 = 1.0 - beta2 ** t
    for p, g in zip(params, grads):
        if g is None:
            continue
        m = state.m.get(p.name)
        v = state.v.get(p.name)
        m = (1.0 - beta1) * g if m is None else beta1 * m + (1.0 - beta1) * g
        v = (1.0 - beta2) * g * g if v is None else beta2 * v + (1.0 - beta2) * g * g
        state.m[p.name], state.v[p.name] = m, v
        update = lr * (m / correction1) / (np.sqrt(v / correction2) + eps)
        p.data = (p.data - update).astype(p.dtype, copy=False)
    return params, state


def cosine_warmup_lr(step, warmup_steps, total_steps, max_lr):
    """Linear ramp 0→max_lr over warm-up, then half-cosine decay to 0 at total_steps."""
    step = min(max(step, 0), total_steps)
    if warmup_steps > 0 and step < warmup_steps:
        return max_lr * step / warmup_steps
    span = total_steps - warmup_steps
    if span <= 0:
        return max_lr
    progress = (step - warmup_steps) / span
    return max_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def global_norm(grads):
    return math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads if g is not None))


def clip_global_norm(grads, max_norm):
    """Scale all gradients by max_norm/norm when their joint L2 norm exceeds max_norm."""
    if max_norm <= 0:
        raise ConfigurationError(f"clip norm must be positive, got {max_norm}")
    norm = global_norm(grads)
    if norm <= max_norm:
        return list(grads)
    scale = max_norm / norm
    return [None if g is None else (g * scale).astype(g.dtype, copy=False) for g in grads]


# ============ GRADIENT ORACLE ============

def _as_scalar(value):
    if isinstance(value, Tensor):
        value = value.data
    return float(np.asarray(value).reshape(-1)[0]) if np.size(value) == 1 else float(value)


def finite_difference_gradient(f, x, h=1e-5):
    """Central-difference estimate of d f(x) / d x, one element at a time."""
    if h <= 0:
        raise ConfigurationError(f"finite-difference step must be positive, got {h}")
    base = np.array(x.data, copy=True)
    grad = np.zeros_like(base)
    with no_grad():
        for idx in np.ndindex(base.shape):
            plus = base.copy()
            plus[idx] += h
            minus = base.copy()
            minus[idx] -= h
            f_plus = _as_scalar(f(Tensor(plus)))
            f_minus = _as_scalar(f(Tensor(minus)))
            if not (math.isfinite(f_plus) and math.isfinite(f_minus)):
                raise NumericError(f"Non-finite function value at element {idx} (f+={f_plus}, f-={f_minus})")
            grad[idx] = (f_plus - f_minus) / (2.0 * h)
    return Tensor(grad)


def relative_error(analytic, numeric):
    """max |a-n| / max(|a|, |n|, tiny) over all elements."""
    a = np.asarray(analytic.data if isinstance(analytic, Tensor) else analytic, dtype=np.float64)
    n = np.asarray(numeric.data if isinstance(numeric, Tensor) else numeric, dtype=np.float64)
    scale = max(float(np.max(np.abs(a), initial=0.0)), float(np.max(np.abs(n), initial=0.0)), 1e-12)
    return float(np.max(np.abs(a - n), initial=0.0)) / scale
