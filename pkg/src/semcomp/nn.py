"""Parameter containers and the transformer building blocks shared by the encoders."""

from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .tensor import Tensor

GROUPS = ("uni_modal", "fusion", "head")


class Parameter(Tensor):
    """A trainable tensor tagged with its learning-rate group."""

    __slots__ = ("group",)

    def __init__(self, data, group="uni_modal", name=None):
        if group not in GROUPS:
            raise ValueError(f"unknown parameter group {group!r}")
        super().__init__(np.array(data, dtype=T.default_dtype()), requires_grad=True, name=name)
        self.group = group


def trunc_normal(rng, shape, std=0.02):
    x = rng.standard_normal(shape)
    while True:
        bad = np.abs(x) > 2.0
        if not bad.any():
            break
        x[bad] = rng.standard_normal(int(bad.sum()))
    return x * std


class Module:
    """Collects Parameters and sub-Modules assigned as attributes, in assignment order."""

    def named_parameters(self, prefix=""):
        for key, value in vars(self).items():
            path = f"{prefix}{key}"
            if isinstance(value, Parameter):
                yield path, value
            elif isinstance(value, Module):
                yield from value.named_parameters(path + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{path}.{i}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None


class Linear(Module):
    def __init__(self, rng, d_in, d_out, group, bias=True):
        self.weight = Parameter(trunc_normal(rng, (d_in, d_out)), group)
        self.bias = Parameter(np.zeros(d_out), group) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = T.matmul(x, self.weight)
        return y + self.bias if self.bias is not None else y


class LayerNorm(Module):
    def __init__(self, d, group, eps=1e-5):
        self.gamma = Parameter(np.ones(d), group)
        self.beta = Parameter(np.zeros(d), group)
        self.eps = eps

    def __call__(self, x):
        return T.layer_norm(x, self.gamma, self.beta, self.eps)


class FeedForward(Module):
    def __init__(self, rng, d, hidden, group):
        self.fc1 = Linear(rng, d, hidden, group)
        self.fc2 = Linear(rng, hidden, d, group)

    def __call__(self, x):
        return self.fc2(T.gelu(self.fc1(x)))


class MultiHeadAttention(Module):
    """Multi-head attention over (B, L, D) inputs.

    Returns the output and the (B, heads, Lq, Lk) probability array.
    """

    def __init__(self, rng, d, heads, group):
        if d % heads:
            raise ValueError(f"width {d} not divisible by {heads} heads")
        self.heads = heads
        self.q = Linear(rng, d, d, group)
        self.k = Linear(rng, d, d, group)
        self.v = Linear(rng, d, d, group)
        self.o = Linear(rng, d, d, group)

    def _split(self, x):
        b, n, d = x.shape
        return x.reshape(b, n, self.heads, d // self.heads).transpose(0, 2, 1, 3)

    def __call__(self, q_in: Tensor, kv_in: Tensor, key_mask=None):
        b, lq, d = q_in.shape
        q = self._split(self.q(q_in))
        k = self._split(self.k(kv_in))
        v = self._split(self.v(kv_in))
        scores = T.matmul(q, k.swapaxes(-1, -2)) * (1.0 / math.sqrt(d // self.heads))
        mask = None
        if key_mask is not None:
            mask = np.asarray(key_mask, dtype=bool)[:, None, None, :]
        probs = T.softmax_masked(scores, mask)
        ctx = T.matmul(probs, v).transpose(0, 2, 1, 3).reshape(b, lq, d)
        return self.o(ctx), probs.data
