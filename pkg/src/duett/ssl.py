"""Masked presence/value pre-training along both the event and time axes."""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field

import numpy as np

from .binning import BinnedData
from .model import DuETT
from .nn import Linear, Module
from .optim import LrSchedule, OptState, adamw_step, lr_at
from .rng import make_rng
from .tensor import NonFiniteError, Tensor, concat, grad, softplus, where

log = logging.getLogger(__name__)


class DivergenceError(FloatingPointError):
    """Training produced a non-finite loss."""


@dataclass(frozen=True)
class MaskSpec:
    """0-based event rows and time-bin columns to replace with [MASK]."""

    masked_events: tuple[int, ...] = ()
    masked_bins: tuple[int, ...] = ()

    def __bool__(self) -> bool:
        return bool(self.masked_events or self.masked_bins)


def sample_mask(n_e: int, n_t: int, k_e: int = 1, k_t: int = 1, rng=None) -> MaskSpec:
    if not (0 <= k_e <= n_e and 0 <= k_t <= n_t):
        raise ValueError(f"cannot mask {k_e} of {n_e} events and {k_t} of {n_t} bins")
    if k_e + k_t == 0:
        raise ValueError("at least one event or bin must be masked")
    ev = tuple(sorted(int(i) for i in rng.choice(n_e, size=k_e, replace=False))) if k_e else ()
    bins = tuple(sorted(int(j) for j in rng.choice(n_t, size=k_t, replace=False))) if k_t else ()
    return MaskSpec(ev, bins)


def mask_grid(spec: MaskSpec, n_rows: int, n_cols: int, n_events: int, n_bins: int) -> np.ndarray:
    """Boolean (n_rows, n_cols) grid of masked cells; static row and [REP] column stay clear."""
    if any(not 0 <= i < n_events for i in spec.masked_events) or any(
        not 0 <= j < n_bins for j in spec.masked_bins
    ):
        raise ValueError(f"mask {spec} out of range for {n_events} events x {n_bins} bins")
    grid = np.zeros((n_rows, n_cols), dtype=bool)
    for i in spec.masked_events:
        grid[i, :n_bins] = True
    for j in spec.masked_bins:
        grid[:n_events, j] = True
    return grid


def apply_mask(phi: Tensor, spec: MaskSpec, mask_token: Tensor, n_events=None, n_bins=None) -> Tensor:
    """Replace masked cells of Phi (B, R, C, d) with the [MASK] embedding."""
    B, R, C, d = phi.shape
    n_events = R - 1 if n_events is None else n_events
    n_bins = C - 1 if n_bins is None else n_bins
    grid = mask_grid(spec, R, C, n_events, n_bins)
    if not grid.any():
        return phi
    return where(grid[None, :, :, None], mask_token.reshape(1, 1, 1, d), phi)


class SslHeads(Module):
    """Separate linear value/presence heads for the event and time axes."""

    def __init__(self, n_events: int, n_bins: int, n_rows: int, d: int, rng):
        row_dim = (n_bins + 1) * d
        col_dim = n_rows * d
        self.event_value = Linear(row_dim, n_bins, rng)
        self.event_presence = Linear(row_dim, n_bins, rng)
        self.time_value = Linear(col_dim, n_events, rng)
        self.time_presence = Linear(col_dim, n_events, rng)


@dataclass
class SslLossReport:
    total: Tensor
    value: float
    presence: float
    axis: dict = field(default_factory=dict)

    @property
    def total_value(self) -> float:
        return float(self.total.data)


def cell_losses(pred_value: Tensor, pres_logit: Tensor, x: np.ndarray, m: np.ndarray):
    """Per-cell squared error on observed cells and presence BCE from logits."""
    observed = (np.asarray(m) > 0).astype(pred_value.data.dtype)
    diff = pred_value - x
    value = diff * diff * observed
    presence = softplus(pres_logit) - pres_logit * observed
    return value, presence


def ssl_loss(
    Z: Tensor,
    spec: MaskSpec,
    x: np.ndarray,
    m: np.ndarray,
    heads: SslHeads,
    alpha: float = 1.0,
    value_weight: float = 1.0,
) -> SslLossReport:
    """Masked-slice reconstruction loss.

    Each masked row or column contributes the mean of its per-cell losses;
    slices are then averaged together and over the batch.  A cell under
    both an event and a bin mask is scored once by each axis's heads.
    ``total = value_weight * value + alpha * presence``.
    """
    if not spec:
        raise ValueError("ssl_loss needs a non-empty mask")
    B, R, C, d = Z.shape
    values, presences, axis = [], [], {}
    if spec.masked_events:
        E = list(spec.masked_events)
        rows = Z[:, E].reshape(B, len(E), C * d)
        v, p = cell_losses(heads.event_value(rows), heads.event_presence(rows), x[:, E, :], m[:, E, :])
        values.append(v.mean(axis=-1))
        presences.append(p.mean(axis=-1))
        axis["event_value"], axis["event_presence"] = float(v.data.mean()), float(p.data.mean())
    if spec.masked_bins:
        J = list(spec.masked_bins)
        cols = Z[:, :, J].transpose(0, 2, 1, 3).reshape(B, len(J), R * d)
        tx = x[:, :, J].transpose(0, 2, 1)
        tm = m[:, :, J].transpose(0, 2, 1)
        v, p = cell_losses(heads.time_value(cols), heads.time_presence(cols), tx, tm)
        values.append(v.mean(axis=-1))
        presences.append(p.mean(axis=-1))
        axis["time_value"], axis["time_presence"] = float(v.data.mean()), float(p.data.mean())
    value = concat(values, axis=1).mean()
    presence = concat(presences, axis=1).mean()
    total = value * value_weight + presence * alpha
    return SslLossReport(total, float(value.data), float(presence.data), axis)


@dataclass
class PretrainConfig:
    epochs: int = 40
    batch_size: int = 32
    peak_lr: float = 1e-3
    warmup_steps: int = 100
    weight_decay: float = 0.01
    alpha: float = 1.0
    value_weight: float = 1.0
    k_e: int = 1
    k_t: int = 1
    seed: int = 2020
    train_rep_token: bool = False


@dataclass
class PretrainResult:
    model_state: dict
    heads_state: dict
    best_epoch: int
    history: list[dict]


def select_best_epoch(val_losses) -> int:
    """0-based index of the lowest validation loss (first on ties)."""
    return int(np.argmin(np.asarray(val_losses)))


def _batch(data: BinnedData, idx):
    return data.x[idx], data.m[idx], data.static[idx], data.times[idx]


def evaluate_ssl(model: DuETT, heads: SslHeads, data: BinnedData, cfg: PretrainConfig, mask_seed: int) -> float:
    """Mean loss over ``data`` with masks drawn from a fixed seed."""
    model.eval()
    rng = make_rng(mask_seed, "val-mask")
    n_e, n_t = data.x.shape[1], data.x.shape[2]
    total, count = 0.0, 0
    for start in range(0, len(data), cfg.batch_size):
        idx = np.arange(start, min(start + cfg.batch_size, len(data)))
        x, m, s, t = _batch(data, idx)
        spec = sample_mask(n_e, n_t, cfg.k_e, cfg.k_t, rng)
        Z, _ = model.encode(x, m, s, t, mask_spec=spec)
        rep = ssl_loss(Z, spec, x, m, heads, cfg.alpha, cfg.value_weight)
        total += rep.total_value * len(idx)
        count += len(idx)
    return total / count


def pretrain(
    train: BinnedData,
    val: BinnedData,
    model: DuETT,
    heads: SslHeads,
    cfg: PretrainConfig,
    on_epoch=None,
) -> PretrainResult:
    """Masked pre-training; returns the weights of the lowest-val-loss epoch."""
    if len(train) == 0 or len(val) == 0:
        raise ValueError("pre-training needs non-empty train and val splits")
    n_e, n_t = train.x.shape[1], train.x.shape[2]
    skip = set() if cfg.train_rep_token else {id(model.embedding.rep_token)}
    params = [p for p in model.parameters() + heads.parameters() if id(p) not in skip]
    state = OptState(weight_decay=cfg.weight_decay)
    sched = LrSchedule(cfg.peak_lr, cfg.warmup_steps)
    shuffle_rng = make_rng(cfg.seed, "shuffle")
    mask_rng = make_rng(cfg.seed, "mask")
    drop_rng = make_rng(cfg.seed, "dropout")
    history: list[dict] = []
    best_loss, best = np.inf, None
    for epoch in range(cfg.epochs):
        model.train()
        heads.train()
        order = shuffle_rng.permutation(len(train))
        sums = np.zeros(3)
        for start in range(0, len(train), cfg.batch_size):
            idx = np.sort(order[start : start + cfg.batch_size])
            x, m, s, t = _batch(train, idx)
            spec = sample_mask(n_e, n_t, cfg.k_e, cfg.k_t, mask_rng)
            try:
                Z, _ = model.encode(x, m, s, t, mask_spec=spec, rng=drop_rng)
                rep = ssl_loss(Z, spec, x, m, heads, cfg.alpha, cfg.value_weight)
                grads = grad(rep.total, params)
            except NonFiniteError as exc:
                raise DivergenceError(f"epoch {epoch + 1}, step {state.step + 1}: {exc}") from exc
            lr = lr_at(state.step + 1, sched)
            adamw_step(params, grads, state, lr)
            sums += np.array([rep.total_value, rep.value, rep.presence]) * len(idx)
        sums /= len(train)
        val_loss = evaluate_ssl(model, heads, val, cfg, cfg.seed)
        if not np.isfinite(val_loss):
            raise DivergenceError(f"epoch {epoch + 1}: validation loss is not finite")
        row = {
            "epoch": epoch + 1,
            "train_loss": float(sums[0]),
            "val_loss": float(val_loss),
            "value_loss": float(sums[1]),
            "presence_loss": float(sums[2]),
            "lr": lr_at(state.step, sched),
        }
        history.append(row)
        log.info("pretrain epoch %d train %.4f val %.4f", epoch + 1, sums[0], val_loss)
        if on_epoch is not None:
            on_epoch(row)
        if val_loss < best_loss:
            best_loss = val_loss
            best = (epoch, model.state_dict(), heads.state_dict())
    epoch, ms, hs = best
    model.load_state_dict(ms)
    heads.load_state_dict(hs)
    return PretrainResult(copy.deepcopy(ms), copy.deepcopy(hs), epoch + 1, history)
