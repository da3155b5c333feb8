"""
Pre-train, fine-tune, evaluate
==============================

The whole pipeline on a small synthetic cohort: generate stays with a
planted label rule, normalize and bin them, pre-train with masked
reconstruction, fine-tune a classifier on 30% of the labels and compare
against the same classifier trained from scratch.
"""

import dataclasses
import logging

from duett.benchmarks import CLASSIFICATION, bench_run_config, prepare_suite
from duett.finetune import evaluate, subsample_labelled
from duett.pipeline import run_finetune, run_pretrain

logging.basicConfig(level=logging.INFO, format="%(message)s")

synth = dataclasses.replace(CLASSIFICATION, n_stays=400)
run = bench_run_config(n_t=8, d=8, L=1, ffn_hidden=64, epochs=8, finetune_epochs=8, seed=2020)
data = prepare_suite(synth, run, run.seed)
print(f"train {len(data.train)} / val {len(data.val)} / test {len(data.test)} stays")
print(f"observed cells in train: {(data.train.m > 0).mean():.1%}")

labelled = data.train.subset(subsample_labelled(len(data.train), 0.3, run.seed))

model, heads, pre = run_pretrain(data.train, data.val, run)
print("best pre-training epoch:", pre.best_epoch + 1)
tuned = run_finetune(labelled, data.val, run, model)
report, _ = evaluate(tuned.model, tuned.head, data.test)
print("\nwith pre-training\n" + report.summary())

scratch, _, _ = run_pretrain(data.train, data.val, dataclasses.replace(run, no_ssl=True))
tuned = run_finetune(labelled, data.val, run, scratch)
report, _ = evaluate(tuned.model, tuned.head, data.test)
print("\nfrom scratch\n" + report.summary())
