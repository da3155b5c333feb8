"""Supervised fine-tuning from the [REP] column, probing, and masked reconstruction."""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field

import numpy as np

from .binning import BinnedData
from .metrics import EvalReport, evaluate_scores
from .model import DuETT
from .nn import BatchNorm, Linear, Module
from .optim import LrSchedule, OptState, adamw_step, lr_at
from .rng import make_rng
from .ssl import DivergenceError, MaskSpec, SslHeads
from .tensor import NonFiniteError, Tensor, concat, grad, softplus

log = logging.getLogger(__name__)

CLS_HIDDEN = 64


class ClsHead(Module):
    """MLP (in -> 64 -> BatchNorm -> ReLU -> n_labels), or a single linear layer for probing."""

    def __init__(self, n_in: int, n_labels: int, rng, linear: bool = False):
        if n_labels < 1:
            raise ValueError("need at least one label")
        self.linear = linear
        if linear:
            self.out = Linear(n_in, n_labels, rng)
        else:
            self.hidden = Linear(n_in, CLS_HIDDEN, rng)
            self.norm = BatchNorm(CLS_HIDDEN)
            self.out = Linear(CLS_HIDDEN, n_labels, rng)

    def __call__(self, h: Tensor) -> Tensor:
        if not self.linear:
            h = self.norm(self.hidden(h)).relu()
        return self.out(h)


def rep_features(Z: Tensor, static_emb: Tensor | None = None) -> Tensor:
    """Flattened [REP] column, with the static embedding appended under late fusion."""
    B, R, C, d = Z.shape
    h = Z[:, :, C - 1].reshape(B, R * d)
    if static_emb is not None:
        h = concat([h, static_emb], axis=1)
    return h


def classify(Z: Tensor, head: ClsHead, static_emb: Tensor | None = None) -> Tensor:
    """Label probabilities from the representation tensor."""
    return head(rep_features(Z, static_emb)).sigmoid()


def bce_weights(rho):
    """Class weights giving positives and negatives equal total weight."""
    rho = np.asarray(rho, dtype=np.float64)
    if np.any(rho <= 0) or np.any(rho >= 1):
        raise ValueError("positive fraction must lie strictly between 0 and 1")
    return 0.5 / rho, 0.5 / (1.0 - rho)


def weighted_bce(probs, labels, rho, eps: float = 1e-12) -> float:
    """Class-balanced BCE on probabilities, summed over labels, averaged over samples."""
    p = np.clip(np.asarray(probs, dtype=np.float64), eps, 1 - eps)
    y = np.asarray(labels, dtype=np.float64)
    w_pos, w_neg = bce_weights(rho)
    ll = -(w_pos * y * np.log(p) + w_neg * (1 - y) * np.log(1 - p))
    ll = ll.reshape(ll.shape[0], -1) if ll.ndim > 1 else ll.reshape(-1, 1)
    return float(ll.sum(axis=1).mean())


def weighted_bce_with_logits(logits: Tensor, labels: np.ndarray, rho) -> Tensor:
    """Differentiable form of :func:`weighted_bce` computed from logits."""
    y = np.asarray(labels, dtype=logits.data.dtype).reshape(logits.shape)
    w_pos, w_neg = bce_weights(rho)
    w = (y * w_pos + (1 - y) * w_neg).astype(logits.data.dtype)
    # -log sigmoid(z) = softplus(-z);  -log(1 - sigmoid(z)) = softplus(z)
    nll = softplus(logits) - logits * y
    return (nll * w).sum(axis=1).mean()


def select_top_epochs(scores, k: int = 5) -> list[int]:
    """0-based indices of the k best epochs (earliest wins ties), in epoch order."""
    scores = np.asarray(scores, dtype=np.float64)
    order = np.argsort(-scores, kind="mergesort")
    return sorted(int(i) for i in order[:k])


def average_states(states: list[dict]) -> dict:
    """Element-wise arithmetic mean of parameter/buffer dictionaries."""
    out = {}
    for name in states[0]:
        acc = np.zeros_like(states[0][name], dtype=np.float64)
        for s in states:
            acc += s[name]
        out[name] = (acc / len(states)).astype(states[0][name].dtype)
    return out


@dataclass
class FinetuneConfig:
    epochs: int = 30
    batch_size: int = 32
    peak_lr: float = 5e-4
    warmup_steps: int = 50
    weight_decay: float = 0.01
    top_k: int = 5
    seed: int = 2020
    freeze_encoder: bool = False


@dataclass
class FinetuneResult:
    model: DuETT
    head: ClsHead
    report: EvalReport
    history: list[dict] = field(default_factory=list)
    top_epochs: list[int] = field(default_factory=list)


def predict(model: DuETT, head: ClsHead, data: BinnedData, batch_size: int = 64) -> np.ndarray:
    model.eval()
    head.eval()
    late = model.cfg.late_static_fusion
    out = []
    for start in range(0, len(data), batch_size):
        sl = slice(start, start + batch_size)
        Z, s_emb = model.encode(data.x[sl], data.m[sl], data.static[sl], data.times[sl])
        out.append(classify(Z, head, s_emb if late else None).data)
    return np.concatenate(out, axis=0) if out else np.zeros((0, data.labels.shape[1]))


def positive_fraction(labels: np.ndarray) -> np.ndarray:
    """Per-label training positive rate, kept inside (0, 1) for the loss weights."""
    n = labels.shape[0]
    rho = labels.mean(axis=0)
    lo = 0.5 / max(n, 1)
    return np.clip(rho, lo, 1 - lo)


def finetune(
    train: BinnedData,
    val: BinnedData,
    model: DuETT,
    cfg: FinetuneConfig,
    on_epoch=None,
) -> FinetuneResult:
    """Train a classification head on top of ``model``; average the top-k epochs.

    With ``freeze_encoder`` the encoder stays in eval mode, only a linear
    head is trained, and encoder weights are left untouched.
    """
    if len(train) == 0 or len(val) == 0:
        raise ValueError("fine-tuning needs non-empty train and val splits")
    n_labels = train.labels.shape[1]
    late = model.cfg.late_static_fusion
    n_in = model.cfg.n_rows * model.cfg.d + (model.cfg.d if late else 0)
    head = ClsHead(n_in, n_labels, make_rng(cfg.seed, "head-init"), linear=cfg.freeze_encoder)
    rho = positive_fraction(train.labels)
    params = head.parameters() if cfg.freeze_encoder else model.parameters() + head.parameters()
    state = OptState(weight_decay=cfg.weight_decay)
    sched = LrSchedule(cfg.peak_lr, cfg.warmup_steps)
    shuffle_rng = make_rng(cfg.seed, "ft-shuffle")
    drop_rng = make_rng(cfg.seed, "ft-dropout")
    history, snapshots, scores = [], [], []
    for epoch in range(cfg.epochs):
        model.train(not cfg.freeze_encoder)
        head.train()
        order = shuffle_rng.permutation(len(train))
        total = 0.0
        for start in range(0, len(train), cfg.batch_size):
            idx = np.sort(order[start : start + cfg.batch_size])
            try:
                Z, s_emb = model.encode(
                    train.x[idx], train.m[idx], train.static[idx], train.times[idx],
                    rng=None if cfg.freeze_encoder else drop_rng,
                )
                if cfg.freeze_encoder:
                    Z = Tensor(Z.data)
                    s_emb = Tensor(s_emb.data)
                logits = head(rep_features(Z, s_emb if late else None))
                loss = weighted_bce_with_logits(logits, train.labels[idx], rho)
                grads = grad(loss, params)
            except NonFiniteError as exc:
                raise DivergenceError(f"fine-tune epoch {epoch + 1}: {exc}") from exc
            adamw_step(params, grads, state, lr_at(state.step + 1, sched))
            total += float(loss.data) * len(idx)
        probs = predict(model, head, val)
        rep = evaluate_scores(probs, val.labels, val.label_names)
        score = rep.macro_pr_auc
        scores.append(score if np.isfinite(score) else -np.inf)
        snapshots.append((model.state_dict(), head.state_dict()))
        row = {"epoch": epoch + 1, "train_loss": total / len(train), "val_pr_auc": score,
               "val_roc_auc": rep.macro_roc_auc, "lr": lr_at(state.step, sched)}
        history.append(row)
        log.info("finetune epoch %d loss %.4f val PR-AUC %.4f", epoch + 1, row["train_loss"], score)
        if on_epoch is not None:
            on_epoch(row)
    top = select_top_epochs(scores, cfg.top_k)
    model.load_state_dict(average_states([snapshots[i][0] for i in top]))
    head.load_state_dict(average_states([snapshots[i][1] for i in top]))
    probs = predict(model, head, val)
    report = evaluate_scores(probs, val.labels, val.label_names)
    return FinetuneResult(model, head, report, history, [i + 1 for i in top])


def evaluate(model: DuETT, head: ClsHead, data: BinnedData) -> tuple[EvalReport, np.ndarray]:
    probs = predict(model, head, data)
    return evaluate_scores(probs, data.labels, data.label_names), probs


@dataclass
class Reconstruction:
    predictions: np.ndarray  # (N, n_t) event-axis value-head output
    per_stay_mse: np.ndarray  # (N,), NaN where the target was never observed
    mse: float | None  # pooled over all observed cells


def reconstruct_masked(
    model: DuETT, heads: SslHeads, data: BinnedData, target_event: int, batch_size: int = 64
) -> Reconstruction:
    """Mask one event row entirely and read back its values from the event-axis head."""
    model.eval()
    spec = MaskSpec(masked_events=(int(target_event),))
    preds = []
    for start in range(0, len(data), batch_size):
        sl = slice(start, start + batch_size)
        Z, _ = model.encode(data.x[sl], data.m[sl], data.static[sl], data.times[sl], mask_spec=spec)
        B, R, C, d = Z.shape
        preds.append(heads.event_value(Z[:, target_event].reshape(B, C * d)).data)
    pred = np.concatenate(preds, axis=0).astype(np.float64)
    target = data.x[:, target_event, :]
    obs = data.m[:, target_event, :] > 0
    sq = (pred - target) ** 2 * obs
    counts = obs.sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        per_stay = np.where(counts > 0, sq.sum(axis=1) / np.maximum(counts, 1), np.nan)
    mse = float(sq.sum() / obs.sum()) if obs.any() else None
    return Reconstruction(pred, per_stay, mse)


def subsample_labelled(n: int, fraction: float, seed: int) -> np.ndarray:
    """Seeded stay-level subsample; the same seed always picks the same stays."""
    if not 0 < fraction <= 1:
        raise ValueError(f"label fraction must lie in (0, 1], got {fraction}")
    k = max(1, int(round(fraction * n)))
    return np.sort(make_rng(seed, "label-subsample").permutation(n)[:k])


def clone_model(model: DuETT) -> DuETT:
    return copy.deepcopy(model)
