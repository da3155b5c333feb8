"""Ranking metrics and the evaluation report."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import rankdata


def _check(scores, labels):
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel()
    if s.shape != y.shape:
        raise ValueError("scores and labels differ in length")
    return s, y > 0.5


def roc_auc(scores, labels) -> float:
    """P(random positive outscores random negative), ties counting one half."""
    s, y = _check(scores, labels)
    n_pos, n_neg = int(y.sum()), int((~y).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("ROC-AUC needs both classes present")
    ranks = rankdata(s)  # average ranks resolve ties as 1/2
    return float((ranks[y].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def _sweep(s: np.ndarray, y: np.ndarray):
    """Cumulative TP/FP at each distinct score threshold, highest first."""
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    last = np.r_[np.flatnonzero(np.diff(s)), s.size - 1]
    tp = np.cumsum(y)[last]
    fp = (last + 1) - tp
    return s[last], tp, fp


def pr_auc(scores, labels) -> float:
    """Average precision: sum over thresholds of precision * recall increment."""
    s, y = _check(scores, labels)
    n_pos = int(y.sum())
    if n_pos == 0:
        raise ValueError("PR-AUC needs at least one positive")
    _, tp, fp = _sweep(s, y)
    precision = tp / (tp + fp)
    recall = tp / n_pos
    d_recall = np.diff(np.r_[0.0, recall])
    return float(np.sum(precision * d_recall))


def roc_curve_points(scores, labels):
    s, y = _check(scores, labels)
    thr, tp, fp = _sweep(s, y)
    tpr = np.r_[0.0, tp / max(y.sum(), 1)]
    fpr = np.r_[0.0, fp / max((~y).sum(), 1)]
    return fpr, tpr, np.r_[np.inf, thr]


def pr_curve_points(scores, labels):
    s, y = _check(scores, labels)
    thr, tp, fp = _sweep(s, y)
    return tp / max(y.sum(), 1), tp / (tp + fp), thr


@dataclass
class EvalReport:
    label_names: list[str]
    roc_auc: list[float]
    pr_auc: list[float]
    positive_rate: list[float]
    reconstruction_mse: float | None = None
    extra: dict = field(default_factory=dict)

    @property
    def macro_roc_auc(self) -> float:
        return float(np.nanmean(self.roc_auc))

    @property
    def macro_pr_auc(self) -> float:
        return float(np.nanmean(self.pr_auc))

    def rows(self) -> list[dict]:
        out = [
            {"label": n, "roc_auc": r, "pr_auc": p, "positive_rate": q}
            for n, r, p, q in zip(self.label_names, self.roc_auc, self.pr_auc, self.positive_rate)
        ]
        out.append(
            {"label": "macro", "roc_auc": self.macro_roc_auc, "pr_auc": self.macro_pr_auc,
             "positive_rate": float(np.mean(self.positive_rate))}
        )
        return out

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.DictWriter(fh, fieldnames=["label", "roc_auc", "pr_auc", "positive_rate"], lineterminator="\n")
            w.writeheader()
            for row in self.rows():
                w.writerow({k: (repr(float(v)) if k != "label" else v) for k, v in row.items()})

    def summary(self) -> str:
        lines = [f"{'label':<20} {'ROC-AUC':>8} {'PR-AUC':>8} {'pos.rate':>8}"]
        for row in self.rows():
            lines.append(f"{row['label']:<20} {row['roc_auc']:8.4f} {row['pr_auc']:8.4f} {row['positive_rate']:8.4f}")
        if self.reconstruction_mse is not None:
            lines.append(f"reconstruction MSE: {self.reconstruction_mse:.6f}")
        return "\n".join(lines) + "\n"


def evaluate_scores(probs: np.ndarray, labels: np.ndarray, label_names) -> EvalReport:
    """Per-label metrics; a label with a single class in ``labels`` gets NaN."""
    probs = np.atleast_2d(np.asarray(probs).T).T
    labels = np.atleast_2d(np.asarray(labels).T).T
    rocs, prs, rates = [], [], []
    for k in range(labels.shape[1]):
        y, s = labels[:, k], probs[:, k]
        rates.append(float((y > 0.5).mean()))
        try:
            rocs.append(roc_auc(s, y))
        except ValueError:
            rocs.append(float("nan"))
        try:
            prs.append(pr_auc(s, y))
        except ValueError:
            prs.append(float("nan"))
    return EvalReport(list(label_names), rocs, prs, rates)


def write_curves(probs: np.ndarray, labels: np.ndarray, label_names, path) -> None:
    """ROC and PR curve points for every label in one long-format CSV."""
    probs = np.atleast_2d(np.asarray(probs).T).T
    labels = np.atleast_2d(np.asarray(labels).T).T
    with open(Path(path), "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["label", "curve", "x", "y", "threshold"])
        for k, name in enumerate(label_names):
            fpr, tpr, thr = roc_curve_points(probs[:, k], labels[:, k])
            for a, b, c in zip(fpr, tpr, thr):
                w.writerow([name, "roc", repr(float(a)), repr(float(b)), repr(float(c))])
            rec, prec, thr = pr_curve_points(probs[:, k], labels[:, k])
            for a, b, c in zip(rec, prec, thr):
                w.writerow([name, "pr", repr(float(a)), repr(float(b)), repr(float(c))])
