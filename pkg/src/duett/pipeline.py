"""End-to-end stages shared by the command line and the benchmark suites."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import checkpoint as ckpt_io
from .binning import BinnedData, bin_dataset
from .config import RunConfig
from .data import NormStats, PatientStay, apply_norm, fit_norm, split
from .finetune import ClsHead, FinetuneConfig, FinetuneResult, finetune
from .model import DuETT, ModelConfig
from .rng import make_rng
from .ssl import PretrainConfig, PretrainResult, SslHeads, pretrain


@dataclass
class Prepared:
    train: BinnedData
    val: BinnedData
    test: BinnedData
    stats: NormStats
    vocab: dict[str, int]


def vocab_from(stays: Sequence[PatientStay]) -> dict[str, int]:
    vocab: dict[str, int] = {}
    for s in stays:
        for e in s.events:
            vocab.setdefault(e.event_type, len(vocab))
    return vocab


def prepare(
    stays: Sequence[PatientStay],
    run: RunConfig,
    vocab: dict[str, int] | None = None,
    split_seed: int | None = None,
) -> Prepared:
    """Split 70/15/15, fit normalization on train, normalize and bin every split."""
    train, val, test = split(stays, seed=run.seed if split_seed is None else split_seed)
    vocab = vocab or vocab_from(train)
    stats = fit_norm(train, vocab, normalize_static=run.normalize_static)
    binned = [bin_split([apply_norm(s, stats) for s in part], vocab, run) for part in (train, val, test)]
    return Prepared(*binned, stats, vocab)


def bin_split(stays, vocab, run: RunConfig, label_names=None, n_static=None) -> BinnedData:
    return bin_dataset(stays, vocab, run.n_t, run.window, run.aggregation, label_names or run.label_list(), n_static)


def model_config(run: RunConfig, n_events: int, n_static: int) -> ModelConfig:
    return ModelConfig(
        n_events=n_events, n_bins=run.n_t, n_static=n_static, d=run.d, n_layers=run.L, n_heads=run.n_heads,
        ffn_hidden=run.ffn_hidden, dropout=run.dropout, variant=run.variant,
        share_embeddings=run.share_embeddings, first_layer_embed_only=run.first_layer_embed_only,
        late_static_fusion=run.late_static_fusion, final_norm=run.final_norm,
    )


def build(run: RunConfig, n_events: int, n_static: int) -> tuple[DuETT, SslHeads]:
    cfg = model_config(run, n_events, n_static)
    model = DuETT(cfg, seed=run.seed)
    heads = SslHeads(n_events, run.n_t, cfg.n_rows, run.d, make_rng(run.seed, "ssl-heads-init"))
    return model, heads


def pretrain_config(run: RunConfig) -> PretrainConfig:
    k_e, k_t = run.mask_counts
    vw, alpha = run.loss_weights
    return PretrainConfig(
        epochs=run.epochs, batch_size=run.batch_size, peak_lr=run.peak_lr, warmup_steps=run.warmup_steps,
        weight_decay=run.weight_decay, alpha=alpha, value_weight=vw, k_e=k_e, k_t=k_t, seed=run.seed,
    )


def finetune_config(run: RunConfig, probe: bool = False) -> FinetuneConfig:
    return FinetuneConfig(
        epochs=run.finetune_epochs, batch_size=run.batch_size, peak_lr=run.finetune_lr,
        warmup_steps=run.finetune_warmup_steps, weight_decay=run.weight_decay, top_k=run.top_k,
        seed=run.seed, freeze_encoder=probe,
    )


def run_pretrain(train: BinnedData, val: BinnedData, run: RunConfig, on_epoch=None):
    model, heads = build(run, train.x.shape[1], train.static.shape[1])
    if run.no_ssl or run.epochs == 0:
        return model, heads, None
    result = pretrain(train, val, model, heads, pretrain_config(run), on_epoch=on_epoch)
    return model, heads, result


def run_finetune(train, val, run: RunConfig, model: DuETT, probe: bool = False, on_epoch=None) -> FinetuneResult:
    return finetune(train, val, model, finetune_config(run, probe), on_epoch=on_epoch)


def data_meta(data: BinnedData, run: RunConfig) -> dict:
    return {
        "event_types": list(data.event_types),
        "label_names": list(data.label_names),
        "n_static": int(data.static.shape[1]),
        "n_t": run.n_t,
        "window_days": run.window_days,
        "aggregation": run.aggregation,
    }


def save_pretrained(path, model: DuETT, heads: SslHeads, run: RunConfig, data: BinnedData,
                    result: PretrainResult | None) -> ckpt_io.Checkpoint:
    meta = {
        "stage": "pretrain",
        "model": model.cfg.to_dict(),
        "data": data_meta(data, run),
        "best_epoch": result.best_epoch if result else 0,
    }
    ck = ckpt_io.bundle({"model": model.state_dict(), "heads": heads.state_dict()}, run.to_text(), meta)
    ckpt_io.save(ck, path)
    return ck


def save_finetuned(path, model: DuETT, head: ClsHead, run: RunConfig, data: BinnedData, probe: bool,
                   top_epochs) -> ckpt_io.Checkpoint:
    meta = {
        "stage": "probe" if probe else "finetune",
        "model": model.cfg.to_dict(),
        "data": data_meta(data, run),
        "head": {"n_in": int(head.out.weight.shape[0] if head.linear else head.hidden.weight.shape[0]),
                 "n_labels": int(head.out.weight.shape[1]), "linear": bool(head.linear)},
        "top_epochs": list(top_epochs),
    }
    ck = ckpt_io.bundle({"model": model.state_dict(), "cls": head.state_dict()}, run.to_text(), meta)
    ckpt_io.save(ck, path)
    return ck


def restore_model(ck: ckpt_io.Checkpoint, seed: int = 0) -> DuETT:
    cfg = ModelConfig(**ck.meta["model"])
    model = DuETT(cfg, seed=seed)
    model.load_state_dict(ck.section("model"))
    return model


def restore_heads(ck: ckpt_io.Checkpoint) -> SslHeads:
    cfg = ModelConfig(**ck.meta["model"])
    heads = SslHeads(cfg.n_events, cfg.n_bins, cfg.n_rows, cfg.d, make_rng(0, "ssl-heads-init"))
    heads.load_state_dict(ck.section("heads"))
    return heads


def restore_head(ck: ckpt_io.Checkpoint) -> ClsHead:
    h = ck.meta["head"]
    head = ClsHead(h["n_in"], h["n_labels"], make_rng(0, "head-init"), linear=h["linear"])
    head.load_state_dict(ck.section("cls"))
    return head


def vocab_of(ck: ckpt_io.Checkpoint) -> dict[str, int]:
    return {t: i for i, t in enumerate(ck.meta["data"]["event_types"])}


def with_overrides(run: RunConfig, **kw) -> RunConfig:
    return dataclasses.replace(run, **kw).validate()


def encoder_from_pretrained(run: RunConfig, ck: ckpt_io.Checkpoint | None, n_events: int, n_static: int) -> DuETT:
    """Fresh model for fine-tuning, initialised from ``ck`` unless it is None (no-SSL)."""
    if ck is None:
        return build(run, n_events, n_static)[0]
    return restore_model(ck, seed=run.seed)


def mean_target_baseline(values: np.ndarray, observed: np.ndarray) -> float:
    """MSE of predicting the pooled mean of the observed values."""
    v = values[observed]
    return float(((v - v.mean()) ** 2).mean())
