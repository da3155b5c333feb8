"""Layers shared by every part of the model.

``Module`` discovers parameters (``Tensor`` attributes with
``requires_grad``), buffers (registered numpy arrays) and submodules in
attribute-definition order, so ``state_dict()`` keys come out in a stable
order that the checkpoint manifest relies on.
"""

from __future__ import annotations

import math
from collections import OrderedDict

import numpy as np

from .tensor import Tensor, get_dtype, l2norm, softmax

SCALE_NORM_EPS = 1e-5
BATCH_NORM_EPS = 1e-5


class Module:
    training: bool = True

    def register_buffer(self, name: str, value: np.ndarray) -> None:
        if "_buffers" not in self.__dict__:
            self._buffers: OrderedDict[str, np.ndarray] = OrderedDict()
        self._buffers[name] = value

    def _children(self):
        for key, val in vars(self).items():
            if isinstance(val, Module):
                yield key, val
            elif isinstance(val, (list, tuple)) and val and all(isinstance(v, Module) for v in val):
                for i, v in enumerate(val):
                    yield f"{key}.{i}", v

    def named_parameters(self, prefix: str = ""):
        for key, val in vars(self).items():
            if isinstance(val, Tensor) and val.requires_grad:
                yield prefix + key, val
        for key, child in self._children():
            yield from child.named_parameters(prefix + key + ".")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = ""):
        for key, val in self.__dict__.get("_buffers", {}).items():
            yield prefix + key, val
        for key, child in self._children():
            yield from child.named_buffers(prefix + key + ".")

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        out = OrderedDict()
        for name, p in self.named_parameters():
            out[name] = p.data.copy()
        for name, b in self.named_buffers():
            out[name] = b.copy()
        return out

    def load_state_dict(self, state: dict, strict: bool = True) -> None:
        params = dict(self.named_parameters())
        owners = {}
        self._collect_buffer_owners("", owners)
        expected = set(params) | set(owners)
        if strict and set(state) != expected:
            missing = sorted(expected - set(state))
            extra = sorted(set(state) - expected)
            raise KeyError(f"state mismatch: missing={missing[:5]} unexpected={extra[:5]}")
        dtype = get_dtype()
        for name, arr in state.items():
            if name in params:
                p = params[name]
                if tuple(arr.shape) != p.shape:
                    raise ValueError(f"shape mismatch for {name}: {arr.shape} vs {p.shape}")
                p.data = np.array(arr, dtype=dtype)
            elif name in owners:
                mod, key = owners[name]
                mod._buffers[key] = np.array(arr, dtype=dtype)

    def _collect_buffer_owners(self, prefix, owners):
        for key in self.__dict__.get("_buffers", {}):
            owners[prefix + key] = (self, key)
        for key, child in self._children():
            child._collect_buffer_owners(prefix + key + ".", owners)

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        for _, child in self._children():
            child.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def n_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


def uniform_param(rng: np.random.Generator, shape, bound: float) -> Tensor:
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


def normal_param(rng: np.random.Generator, shape, std: float = 0.02) -> Tensor:
    return Tensor(rng.normal(0.0, std, size=shape), requires_grad=True)


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator):
        bound = math.sqrt(1.0 / n_in) if n_in > 0 else 0.0
        self.weight = uniform_param(rng, (n_in, n_out), bound)
        self.bias = uniform_param(rng, (n_out,), bound)

    def __call__(self, x: Tensor) -> Tensor:
        return x @ self.weight + self.bias


def scale_norm(x: Tensor, g: Tensor, eps: float = SCALE_NORM_EPS) -> Tensor:
    """g * x / max(||x||, eps) over the last axis."""
    return x * (g / l2norm(x, axis=-1).clamp_min(eps))


class ScaleNorm(Module):
    def __init__(self, dim: int):
        self.g = Tensor(math.sqrt(dim), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return scale_norm(x, self.g)


def dropout(x: Tensor, p: float, training: bool, rng: np.random.Generator | None) -> Tensor:
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    if rng is None:
        raise ValueError("training-mode dropout needs a random generator")
    keep = rng.random(x.shape) >= p
    return x * (keep.astype(x.data.dtype) / (1.0 - p))


class BatchNorm(Module):
    """Normalization with batch statistics in training, running averages in eval.

    A training batch of size 1 has no usable variance and falls back to the
    running statistics.
    """

    def __init__(self, dim: int, momentum: float = 0.1):
        self.gamma = Tensor(np.ones(dim), requires_grad=True)
        self.beta = Tensor(np.zeros(dim), requires_grad=True)
        self.momentum = momentum
        self.register_buffer("running_mean", np.zeros(dim, dtype=get_dtype()))
        self.register_buffer("running_var", np.ones(dim, dtype=get_dtype()))

    def __call__(self, x: Tensor) -> Tensor:
        if self.training and x.shape[0] > 1:
            mu = x.mean(axis=0, keepdims=True)
            centered = x - mu
            var = (centered * centered).mean(axis=0, keepdims=True)
            n = x.shape[0]
            mom = self.momentum
            b = self._buffers
            b["running_mean"] = ((1 - mom) * b["running_mean"] + mom * mu.data[0]).astype(get_dtype())
            b["running_var"] = ((1 - mom) * b["running_var"] + mom * var.data[0] * n / (n - 1)).astype(get_dtype())
            xhat = centered / (var + BATCH_NORM_EPS).sqrt()
        else:
            b = self._buffers
            xhat = (x - b["running_mean"]) / np.sqrt(b["running_var"] + BATCH_NORM_EPS)
        return xhat * self.gamma + self.beta


class Attention(Module):
    def __init__(self, dim: int, n_heads: int, rng: np.random.Generator):
        if dim % n_heads:
            raise ValueError(f"token dim {dim} not divisible by n_heads={n_heads}")
        self.n_heads = n_heads
        self.q = Linear(dim, dim, rng)
        self.k = Linear(dim, dim, rng)
        self.v = Linear(dim, dim, rng)
        self.out = Linear(dim, dim, rng)


def multi_head_attention(
    x: Tensor,
    attn: Attention,
    dropout_p: float = 0.0,
    training: bool = False,
    rng: np.random.Generator | None = None,
    counter: list | None = None,
) -> Tensor:
    """Unmasked scaled dot-product attention over axis -2 of ``x`` (B, T, D)."""
    B, T, D = x.shape
    H = attn.n_heads
    if D % H:
        raise ValueError(f"token dim {D} not divisible by n_heads={H}")
    dh = D // H

    def heads(t: Tensor) -> Tensor:
        return t.reshape(B, T, H, dh).transpose(0, 2, 1, 3)

    q, k, v = heads(attn.q(x)), heads(attn.k(x)), heads(attn.v(x))
    scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(dh))
    weights = dropout(softmax(scores, axis=-1), dropout_p, training, rng)
    if counter is not None:
        counter.append((T, T))
    mixed = (weights @ v).transpose(0, 2, 1, 3).reshape(B, T, D)
    return attn.out(mixed)


class FeedForward(Module):
    def __init__(self, dim: int, hidden: int, rng: np.random.Generator):
        self.up = Linear(dim, hidden, rng)
        self.down = Linear(hidden, dim, rng)

    def __call__(self, x: Tensor, dropout_p=0.0, training=False, rng=None) -> Tensor:
        return self.down(dropout(self.up(x).relu(), dropout_p, training, rng))


class TransformerSublayer(Module):
    """Pre-norm block: x + Attn(SN(x)), then + FFN(SN(.))."""

    def __init__(self, dim: int, n_heads: int, ffn_hidden: int, rng: np.random.Generator, dropout_p: float = 0.1):
        self.dim = dim
        self.ffn_hidden = ffn_hidden
        self.dropout_p = dropout_p
        self.norm_attn = ScaleNorm(dim)
        self.attn = Attention(dim, n_heads, rng)
        self.norm_ffn = ScaleNorm(dim)
        self.ffn = FeedForward(dim, ffn_hidden, rng)

    def __call__(self, x: Tensor, rng=None, counter=None) -> Tensor:
        p, tr = self.dropout_p, self.training
        a = multi_head_attention(self.norm_attn(x), self.attn, p, tr, rng, counter)
        x = x + dropout(a, p, tr, rng)
        f = self.ffn(self.norm_ffn(x), p, tr, rng)
        return x + dropout(f, p, tr, rng)

    def flops(self, n_tokens: int) -> int:
        """Multiply-adds of one forward pass for a single sequence."""
        D, H, T = self.dim, self.ffn_hidden, n_tokens
        return 4 * T * D * D + 2 * T * T * D + 2 * T * D * H
