"""Seeded desk-scale benchmark suites over the synthetic generator.

``bench_reconstruction`` masks a planted target event and compares the
full model against event-only and time-only variants.  ``bench_ssl_gain``
compares fine-tuning with and without pre-training at a small labelled
fraction.  ``sweep_labels`` fine-tunes one pre-trained encoder on growing
labelled subsets.
"""

from __future__ import annotations

import csv
import dataclasses
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .binning import BinnedData
from .config import RunConfig
from .data import LabelRule, Link, SynthConfig, apply_norm, fit_norm, generate_synthetic, split
from .finetune import evaluate, reconstruct_masked, subsample_labelled
from .pipeline import Prepared, bin_split, run_finetune, run_pretrain

log = logging.getLogger(__name__)

SEEDS = (2020, 2021, 2022)
SPLIT_FRACTIONS = (800 / 1200, 200 / 1200, 200 / 1200)

# target 1 <- event 0 in the same bin and event 2 three bins earlier
RECON_TARGET = 1
RECONSTRUCTION = SynthConfig(
    n_events=12,
    n_static=4,
    n_stays=1200,
    window_days=2.0,
    n_bins=16,
    sparsity=(0.8, 0.6, 0.8, 0.5, 0.5, 0.5, 0.5, 0.5, 0.5, 0.5, 0.5, 0.5),
    links=(
        Link(0, 1, 0, 0.8),
        Link(2, 1, 3, 0.8),
        Link(3, 4, 0, 0.9),
        Link(5, 6, 2, 0.9),
    ),
    noise=0.1,
    label_rules=(LabelRule("outcome", events=(1,), weight=2.0),),
)

# the label depends on the late-window latent of events that are often missing
CLASSIFICATION = SynthConfig(
    n_events=12,
    n_static=4,
    n_stays=1200,
    window_days=2.0,
    n_bins=16,
    sparsity=(0.25, 0.8, 0.8, 0.5, 0.5, 0.5, 0.5, 0.5, 0.5, 0.5, 0.5, 0.5),
    links=(
        Link(1, 0, 0, 0.7),
        Link(2, 0, 2, 0.7),
        Link(3, 4, 0, 0.9),
    ),
    noise=0.2,
    label_rules=(LabelRule("outcome", events=(0,), weight=3.0, bias=-1.5, tail=0.25),),
)


def bench_run_config(**kw) -> RunConfig:
    """Desk-scale defaults: n_t=16, d=16, L=2, small FFN, short schedules."""
    base = dict(
        d=16, L=2, n_t=16, n_heads=4, ffn_hidden=128, dropout=0.1, epochs=20, finetune_epochs=20,
        peak_lr=1e-3, finetune_lr=5e-4, warmup_steps=100, finetune_warmup_steps=30, batch_size=32,
        window_days="2.0", labels="outcome",
    )
    base.update(kw)
    return RunConfig(**base).validate()


@dataclass(frozen=True)
class BenchSuite:
    name: str
    synth: SynthConfig
    seeds: tuple[int, ...] = SEEDS
    expected: tuple[str, ...] = ()


SUITES = {
    "reconstruction": BenchSuite(
        "reconstruction", RECONSTRUCTION, expected=("duett <= event_only", "duett <= time_only")
    ),
    "classification": BenchSuite(
        "classification", CLASSIFICATION, expected=("pretrained >= scratch", "pr_auc non-decreasing in fraction")
    ),
}


def prepare_suite(synth: SynthConfig, run: RunConfig, seed: int) -> Prepared:
    stays = generate_synthetic(synth, seed)
    train, val, test = split(stays, SPLIT_FRACTIONS, seed)
    vocab = {name: i for i, name in enumerate(synth.event_names())}
    stats = fit_norm(train, vocab, normalize_static=run.normalize_static)
    parts = [bin_split([apply_norm(s, stats) for s in p], vocab, run) for p in (train, val, test)]
    return Prepared(*parts, stats, vocab)


@dataclass
class ReconResult:
    seed: int
    mse: dict[str, float]
    target_variance: float
    mean_baseline: float
    seconds: float

    @property
    def duett_best(self) -> bool:
        return self.mse["duett"] <= self.mse["event_only"] and self.mse["duett"] <= self.mse["time_only"]


def bench_reconstruction(seed: int, run: RunConfig | None = None, synth: SynthConfig = RECONSTRUCTION,
                         target: int = RECON_TARGET) -> ReconResult:
    """Masked-event reconstruction MSE on the validation split for the three variants."""
    t0 = time.time()
    run = run or bench_run_config()
    run = dataclasses.replace(run, seed=seed)
    data = prepare_suite(synth, run, seed)
    mse = {}
    for variant in ("duett", "event_only", "time_only"):
        vr = dataclasses.replace(run, event_only=variant == "event_only", time_only=variant == "time_only")
        model, heads, _ = run_pretrain(data.train, data.val, vr)
        mse[variant] = reconstruct_masked(model, heads, data.val, target).mse
        log.info("seed %d %s masked MSE %.4f", seed, variant, mse[variant])
    obs = data.val.m[:, target] > 0
    vals = data.val.x[:, target][obs]
    var = float(vals.var())
    train_vals = data.train.x[:, target][data.train.m[:, target] > 0]
    baseline = float(((vals - train_vals.mean()) ** 2).mean())
    return ReconResult(seed, mse, var, baseline, time.time() - t0)


@dataclass
class SslGainResult:
    seed: int
    pretrained: float
    scratch: float
    positive_rate: float
    seconds: float


def _labelled(data: BinnedData, fraction: float, seed: int) -> BinnedData:
    return data.subset(subsample_labelled(len(data), fraction, seed))


def bench_ssl_gain(seed: int, run: RunConfig | None = None, synth: SynthConfig = CLASSIFICATION,
                   fraction: float = 0.1) -> SslGainResult:
    """Test PR-AUC with and without pre-training, same fine-tuning budget."""
    t0 = time.time()
    run = dataclasses.replace(run or bench_run_config(), seed=seed)
    data = prepare_suite(synth, run, seed)
    labelled = _labelled(data.train, fraction, seed)
    scores = {}
    for no_ssl in (False, True):
        r = dataclasses.replace(run, no_ssl=no_ssl)
        model, _, _ = run_pretrain(data.train, data.val, r)
        ft = run_finetune(labelled, data.val, r, model)
        rep, _ = evaluate(ft.model, ft.head, data.test)
        scores[no_ssl] = rep.macro_pr_auc
    rate = float(data.test.labels.mean())
    return SslGainResult(seed, scores[False], scores[True], rate, time.time() - t0)


@dataclass
class SweepResult:
    seed: int
    rows: list[dict] = field(default_factory=list)


def sweep_labels(train: BinnedData, val: BinnedData, test: BinnedData, run: RunConfig, encoder_state: dict | None,
                 fractions=(0.1, 0.3, 1.0), build_model=None) -> list[dict]:
    """Fine-tune from the same encoder on each labelled fraction; report test PR-AUC."""
    from .pipeline import build

    rows = []
    for frac in fractions:
        if not 0 < frac <= 1:
            raise ValueError(f"label fraction must lie in (0, 1], got {frac}")
        model, _ = build(run, train.x.shape[1], train.static.shape[1])
        if encoder_state is not None:
            model.load_state_dict(encoder_state)
        labelled = _labelled(train, frac, run.seed)
        ft = run_finetune(labelled, val, run, model)
        rep, _ = evaluate(ft.model, ft.head, test)
        rows.append({"fraction": frac, "n_labelled": len(labelled), "pr_auc": rep.macro_pr_auc,
                     "roc_auc": rep.macro_roc_auc})
    return rows


def bench_label_sweep(seed: int, run: RunConfig | None = None, synth: SynthConfig = CLASSIFICATION,
                      fractions=(0.1, 0.3, 1.0)) -> SweepResult:
    run = dataclasses.replace(run or bench_run_config(), seed=seed)
    data = prepare_suite(synth, run, seed)
    model, _, _ = run_pretrain(data.train, data.val, run)
    rows = sweep_labels(data.train, data.val, data.test, run, model.state_dict(), fractions)
    for r in rows:
        r["seed"] = seed
    return SweepResult(seed, rows)


def write_rows(rows: list[dict], path) -> None:
    if not rows:
        return
    with open(Path(path), "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)


def run_suite(name: str, out_dir, seeds=SEEDS, run: RunConfig | None = None) -> bool:
    """Run a named suite, write ``<name>.csv`` and ``<name>_summary.txt``; return pass/fail."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if name == "reconstruction":
        res = [bench_reconstruction(s, run) for s in seeds]
        rows = [{"seed": r.seed, **{f"mse_{k}": v for k, v in r.mse.items()},
                 "target_variance": r.target_variance, "mean_baseline": r.mean_baseline} for r in res]
        wins = sum(r.duett_best for r in res)
        ok = wins >= 2
        summary = f"reconstruction: duett best on {wins}/{len(res)} seeds -> {'PASS' if ok else 'FAIL'}\n"
    elif name == "classification":
        res = [bench_ssl_gain(s, run) for s in seeds]
        rows = [dataclasses.asdict(r) for r in res]
        pre = float(np.mean([r.pretrained for r in res]))
        scr = float(np.mean([r.scratch for r in res]))
        ok = pre >= scr
        summary = f"ssl gain: pretrained {pre:.4f} vs scratch {scr:.4f} -> {'PASS' if ok else 'FAIL'}\n"
    elif name == "label-sweep":
        rows = [row for s in seeds for row in bench_label_sweep(s, run).rows]
        fr = sorted({r["fraction"] for r in rows})
        means = [float(np.mean([r["pr_auc"] for r in rows if r["fraction"] == f])) for f in fr]
        ok = all(a <= b for a, b in zip(means, means[1:]))
        summary = "label sweep: " + ", ".join(f"{f:g}->{m:.4f}" for f, m in zip(fr, means))
        summary += f" -> {'PASS' if ok else 'FAIL'}\n"
    else:
        raise ValueError(f"unknown suite {name!r}")
    write_rows(rows, out / f"{name}.csv")
    (out / f"{name}_summary.txt").write_text(summary, encoding="utf-8")
    return ok
