"""Input tensor construction: cell, static, [REP] and continuous-time embeddings."""

from __future__ import annotations

import math

import numpy as np

from .nn import BatchNorm, Linear, Module, normal_param
from .tensor import Tensor, as_tensor, concat

N_COUNT_BINS = 16
STATIC_HIDDEN = 128


def count_bin(count):
    """Counts 0..14 map to themselves, anything >= 15 to bin 15."""
    c = np.asarray(count)
    if np.any(c < 0):
        raise ValueError("observation counts must be non-negative")
    out = np.minimum(c, N_COUNT_BINS - 1).astype(np.int64)
    return int(out) if out.ndim == 0 else out


class StaticEncoder(Module):
    def __init__(self, n_static: int, d: int, rng, hidden: int = STATIC_HIDDEN):
        self.hidden = Linear(n_static, hidden, rng)
        self.norm = BatchNorm(hidden)
        self.proj = Linear(hidden, d, rng)

    def __call__(self, s: Tensor) -> Tensor:
        return self.proj(self.norm(self.hidden(s)).relu())


class InputEmbedding(Module):
    """Learned pieces of the input tensor.

    ``cell`` maps ``[value, count_table[count_bin(m)]]`` to a d-vector.
    """

    def __init__(self, n_static: int, d: int, rng):
        self.d = d
        self.cell = Linear(2, d, rng)
        self.count_table = normal_param(rng, (N_COUNT_BINS,))
        self.static = StaticEncoder(n_static, d, rng)
        self.rep_token = normal_param(rng, (d,))
        self.mask_token = normal_param(rng, (d,))

    def embed_cell(self, x, m) -> Tensor:
        """Embeddings for arrays of values ``x`` and counts ``m`` of equal shape."""
        x = as_tensor(x)
        counts = self.count_table[count_bin(m)]
        feats = concat([x.reshape(*x.shape, 1), counts.reshape(*counts.shape, 1)], axis=-1)
        return self.cell(feats)

    def embed_static(self, s) -> Tensor:
        return self.static(as_tensor(s))

    def assemble(self, x, m, static=None, static_emb: Tensor | None = None, static_row: bool = True) -> Tensor:
        """Phi for a batch: (B, n_e[+1], n_t+1, d).

        The static row repeats the static embedding across bins; the last
        column is [REP] in every row, the static row included.
        """
        x = np.asarray(x)
        B, n_e, n_t = x.shape
        d = self.d
        rows = self.embed_cell(x, np.asarray(m))
        if static_row:
            if static_emb is None:
                static_emb = self.embed_static(static)
            srow = static_emb.reshape(B, 1, 1, d).broadcast_to((B, 1, n_t, d))
            rows = concat([rows, srow], axis=1)
        R = rows.shape[1]
        rep = self.rep_token.reshape(1, 1, 1, d).broadcast_to((B, R, 1, d))
        return concat([rows, rep], axis=2)


class TimeCVE(Module):
    """Scalar time (days) -> tanh hidden layer -> ``out_dim`` embedding."""

    def __init__(self, out_dim: int, rng, hidden: int | None = None):
        if hidden is None:
            hidden = max(1, int(round(math.sqrt(out_dim))))
        self.hidden_size = hidden
        self.hidden = Linear(1, hidden, rng)
        self.out = Linear(hidden, out_dim, rng)

    def __call__(self, t_days) -> Tensor:
        t = as_tensor(np.asarray(t_days))
        return self.out(self.hidden(t.reshape(*t.shape, 1)).tanh())


def time_cve(t_days, cve: TimeCVE) -> Tensor:
    return cve(t_days)
