"""Dense numpy-backed tensors with reverse-mode automatic differentiation.

Every differentiable operation returns a new :class:`Tensor` that remembers its
parents and a closure mapping the upstream gradient to parent gradients.
:func:`backward` orders the graph topologically into a :class:`GradTape` and
replays it in reverse, visiting each node once.

Precision defaults to float32. Wrap model construction in :func:`float64` to
get the 64-bit verification mode used by the gradient checks.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np

_DTYPE = np.float32
_STRICT = False
_GRAD_ENABLED = True


class DimensionError(ValueError):
    pass


class DegenerateRowError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


def default_dtype():
    return _DTYPE


@contextlib.contextmanager
def float64():
    """Create tensors in 64-bit precision inside the block."""
    global _DTYPE
    prev, _DTYPE = _DTYPE, np.float64
    try:
        yield
    finally:
        _DTYPE = prev


@contextlib.contextmanager
def no_grad():
    """Record no graph inside the block (evaluation forwards)."""
    global _GRAD_ENABLED
    prev, _GRAD_ENABLED = _GRAD_ENABLED, False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


@contextlib.contextmanager
def strict():
    """Raise NonFiniteError as soon as an op produces NaN or Inf."""
    global _STRICT
    prev, _STRICT = _STRICT, True
    try:
        yield
    finally:
        _STRICT = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        arr = np.asarray(data, dtype=dtype or (data.dtype if _is_float_array(data) else _DTYPE))
        if arr.ndim and 0 in arr.shape:
            raise DimensionError(f"tensor extents must be positive, got {arr.shape}")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = None
        self._parents: tuple = ()
        self._backward: Callable | None = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other, self.dtype)))

    def __rsub__(self, other):
        return add(as_tensor(other, self.dtype), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, reciprocal(other))
        return mul(self, 1.0 / other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def swapaxes(self, a, b):
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return transpose(self, tuple(axes))

    @property
    def T(self):
        return self.swapaxes(-1, -2)

    def backward(self):
        backward(self)


def _is_float_array(x):
    return isinstance(x, np.ndarray) and x.dtype in (np.float32, np.float64)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype or _DTYPE))


def tensor(data, requires_grad=False, name=None) -> Tensor:
    return Tensor(np.array(data, dtype=_DTYPE), requires_grad=requires_grad, name=name)


def _result_dtype(*ts):
    for t in ts:
        if isinstance(t, Tensor):
            return t.dtype
    return _DTYPE


def _make(data, parents, backward_fn) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out.requires_grad = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out._parents = ()
        out._backward = None
    if _STRICT and not np.all(np.isfinite(data)):
        raise NonFiniteError(f"non-finite values produced (shape {data.shape})")
    return out


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and grad.shape[i] != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# tape and backward


class GradTape:
    """Topologically ordered record of the operations reachable from a root."""

    def __init__(self, root: Tensor):
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        self.nodes = order

    def __len__(self):
        return len(self.nodes)

    def __iter__(self):
        return iter(self.nodes)


def backward(loss: Tensor) -> GradTape:
    """Accumulate d(loss)/d(x) into ``x.grad`` for every reachable tensor x.

    Calling this twice without clearing grads adds the gradients twice.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = GradTape(loss)
    if not loss.requires_grad:
        return tape
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        node.grad = g if node.grad is None else node.grad + g
        if node._backward is None:
            continue
        parent_grads = node._backward(g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    return tape


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    dt = _result_dtype(a, b)
    a, b = as_tensor(a, dt), as_tensor(b, dt)
    sa, sb = a.shape, b.shape

    def bw(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _make(a.data + b.data, (a, b), bw)


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    dt = _result_dtype(a, b)
    a, b = as_tensor(a, dt), as_tensor(b, dt)
    sa, sb = a.shape, b.shape

    def bw(g):
        return (
            _unbroadcast(g * b.data, sa) if a.requires_grad else None,
            _unbroadcast(g * a.data, sb) if b.requires_grad else None,
        )

    return _make(a.data * b.data, (a, b), bw)


def reciprocal(a: Tensor) -> Tensor:
    out = 1.0 / a.data
    return _make(out, (a,), lambda g: (-g * out * out,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * 0.5 / out,))


def square(a: Tensor) -> Tensor:
    return _make(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,))


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp values; gradient passes only where the input is inside [lo, hi]."""
    inside = (a.data >= lo) & (a.data <= hi)
    return _make(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,))


def maximum_scalar(a: Tensor, floor: float) -> Tensor:
    keep = a.data >= floor
    return _make(np.maximum(a.data, floor), (a,), lambda g: (g * keep,))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """Tanh-approximated GELU."""
    x = a.data
    x2 = x * x
    t = x2 * 0.044715
    t += 1.0
    t *= x
    t *= _GELU_C
    np.tanh(t, out=t)
    out = t + 1.0
    out *= x
    out *= 0.5

    def bw(g):
        # d/dx = 0.5 (1 + t) + 0.5 x (1 - t^2) c (1 + 3 * 0.044715 x^2), written in place
        d = x2 * (3 * 0.044715 * _GELU_C)
        d += _GELU_C
        d *= x
        d *= 1.0 - t * t
        d += 1.0
        d += t
        d *= 0.5
        d *= g
        return (d,)

    return _make(out, (a,), bw)


def detach(a: Tensor) -> Tensor:
    """Same values, no gradient path back to ``a``."""
    out = Tensor.__new__(Tensor)
    out.data = a.data
    out.requires_grad = False
    out.grad = None
    out._parents = ()
    out._backward = None
    out.name = None
    return out


# ---------------------------------------------------------------------------
# shape ops


def reshape(a: Tensor, shape) -> Tensor:
    src = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),))


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def getitem(a: Tensor, idx) -> Tensor:
    src_shape, src_dtype = a.shape, a.dtype

    def bw(g):
        full = np.zeros(src_shape, dtype=src_dtype)
        np.add.at(full, idx, g)
        return (full,)

    return _make(a.data[idx], (a,), bw)


def concat(tensors: Sequence[Tensor], axis=0) -> Tensor:
    tensors = list(tensors)
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if len(t.shape) != len(ref) or any(
            t.shape[i] != ref[i] for i in range(len(ref)) if i != ax
        ):
            raise DimensionError(
                f"concat along axis {axis}: incompatible shapes {[x.shape for x in tensors]}"
            )
    sizes = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, sizes, axis=ax))

    return _make(np.concatenate([t.data for t in tensors], axis=ax), tuple(tensors), bw)


def stack(tensors: Sequence[Tensor], axis=0) -> Tensor:
    tensors = list(tensors)
    shape = tensors[0].shape
    for t in tensors:
        if t.shape != shape:
            raise DimensionError(f"stack needs equal shapes, got {[x.shape for x in tensors]}")

    def bw(g):
        return tuple(np.moveaxis(g, axis, 0))

    return _make(np.stack([t.data for t in tensors], axis=axis), tuple(tensors), bw)


# ---------------------------------------------------------------------------
# reductions


def sum_(a: Tensor, axis=None, keepdims=False) -> Tensor:
    src = a.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).copy(),)

    return _make(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), bw)


def mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    if axis is None:
        count = a.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([a.shape[i] for i in axes]))
    return sum_(a, axis, keepdims) * (1.0 / count)


def mean_pool(a: Tensor, axis: int) -> Tensor:
    return mean(a, axis=axis)


def logsumexp(a: Tensor, axis=-1) -> Tensor:
    x = a.data
    m = x.max(axis=axis, keepdims=True)
    e = np.exp(x - m)
    s = e.sum(axis=axis, keepdims=True)
    out = (np.log(s) + m).squeeze(axis)

    def bw(g):
        return (np.expand_dims(g, axis) * (e / s),)

    return _make(out, (a,), bw)


# ---------------------------------------------------------------------------
# linear algebra and nn primitives


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    sa, sb = a.shape, b.shape

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            if b.ndim == 2:
                ga = (g.reshape(-1, sb[-1]) @ b.data.T).reshape(sa)
            else:
                ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), sa)
        if b.requires_grad:
            if b.ndim == 2:
                # fold leading axes instead of materializing a per-batch weight gradient
                gb = a.data.reshape(-1, sa[-1]).T @ g.reshape(-1, sb[-1])
            else:
                gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, sb)
        return ga, gb

    if b.ndim == 2 and a.ndim > 2:
        # one large GEMM rather than a loop over the leading axes
        out = (a.data.reshape(-1, sa[-1]) @ b.data).reshape(*sa[:-1], sb[-1])
    else:
        out = np.matmul(a.data, b.data)
    return _make(out, (a, b), bw)


def softmax_masked(logits: Tensor, mask=None) -> Tensor:
    """Softmax over the last axis; ``mask`` (broadcastable, True = allowed)."""
    x = logits.data
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if not np.all(np.broadcast_to(mask, x.shape).any(axis=-1)):
            raise DegenerateRowError("softmax row has every position masked")
        x = np.where(mask, x, -np.inf)
    m = x.max(axis=-1, keepdims=True)
    e = np.exp(x - m)
    p = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _make(p, (logits,), bw)


def log_softmax(logits: Tensor) -> Tensor:
    x = logits.data
    m = x.max(axis=-1, keepdims=True)
    z = x - m
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def bw(g):
        return (g - p * g.sum(axis=-1, keepdims=True),)

    return _make(out, (logits,), bw)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(f"layer_norm: x {x.shape}, gamma {gamma.shape}, beta {beta.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def bw(g):
        gx = gx_hat = None
        if x.requires_grad:
            gx_hat = g * gamma.data
            gx = inv * (
                gx_hat
                - gx_hat.mean(axis=-1, keepdims=True)
                - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True)
            )
        lead = tuple(range(g.ndim - 1))
        gg = (g * xhat).sum(axis=lead) if gamma.requires_grad else None
        gb = g.sum(axis=lead) if beta.requires_grad else None
        return gx, gg, gb

    return _make(out, (x, gamma, beta), bw)


def embedding_lookup(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"embedding id out of range for table of {table.shape[0]} rows")
    shape, dt = table.shape, table.dtype

    def bw(g):
        full = np.zeros(shape, dtype=dt)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, shape[1]))
        return (full,)

    return _make(table.data[ids], (table,), bw)


def cross_entropy_logits(logits: Tensor, targets) -> Tensor:
    """Mean negative log-probability of ``targets`` under row-wise softmax."""
    targets = np.asarray(targets, dtype=np.int64)
    if logits.ndim != 2:
        raise DimensionError(f"cross_entropy_logits expects n x C logits, got {logits.shape}")
    n, c = logits.shape
    if targets.shape != (n,):
        raise DimensionError(f"targets shape {targets.shape} does not match logits {logits.shape}")
    if n == 0:
        raise ValueError("cross_entropy_logits needs at least one row")
    if targets.min() < 0 or targets.max() >= c:
        raise IndexError(f"target index out of range for {c} classes")
    x = logits.data
    m = x.max(axis=-1, keepdims=True)
    z = x - m
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - lse
    rows = np.arange(n)
    loss = -logp[rows, targets].mean()

    def bw(g):
        p = np.exp(logp)
        p[rows, targets] -= 1.0
        return (p * (g / n),)

    return _make(np.asarray(loss, dtype=x.dtype), (logits,), bw)


def normalize(x: Tensor, axis=-1, eps: float = 1e-8) -> Tensor:
    """x / max(||x||, eps) along ``axis``."""
    norm = sqrt(sum_(square(x), axis=axis, keepdims=True))
    return x * reciprocal(maximum_scalar(norm, eps))


def cosine_similarity(u: Tensor, v: Tensor, eps: float = 1e-8) -> Tensor:
    """Cosine along the last axis, guarding zero vectors with ``eps``."""
    return sum_(normalize(u, eps=eps) * normalize(v, eps=eps), axis=-1)


def zeros(shape, requires_grad=False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=_DTYPE), requires_grad=requires_grad)


def ones(shape, requires_grad=False) -> Tensor:
    return Tensor(np.ones(shape, dtype=_DTYPE), requires_grad=requires_grad)


def parameters_zero_grad(params: Iterable[Tensor]):
    for p in params:
        p.grad = None
