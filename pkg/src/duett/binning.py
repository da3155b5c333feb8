"""Aggregate a stay's irregular events onto a regular (event type x time bin) grid."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .data import PatientStay

log = logging.getLogger(__name__)

AGGREGATIONS = ("last", "mean", "max", "min")


@dataclass
class BinnedStay:
    x: np.ndarray  # (n_e, n_t) aggregated values, 0 where unobserved
    m: np.ndarray  # (n_e, n_t) observation counts
    bin_end_days: np.ndarray  # (n_t,)
    window_days: float


def bin_times(n_t: int, window_days: float) -> np.ndarray:
    """End time of each bin in days since stay start; the last equals the window."""
    if n_t < 1:
        raise ValueError("n_t must be >= 1")
    if window_days <= 0:
        raise ValueError("window_days must be positive")
    edges = np.arange(1, n_t + 1, dtype=np.float64) * window_days / n_t
    edges[-1] = window_days
    return edges


def resolve_window(stay: PatientStay, window_days) -> float:
    """``"auto"`` means the stay's own duration (its last event time)."""
    if window_days == "auto":
        last = stay.events[-1].time_days if stay.events else 0.0
        return last if last > 0 else 1.0
    return float(window_days)


def bin_stay(
    stay: PatientStay,
    vocab: Mapping[str, int],
    n_t: int = 32,
    window_days: float | str = 2.0,
    agg: str = "last",
) -> BinnedStay:
    """Bin ``[j*w/n_t, (j+1)*w/n_t)``; the final bin also holds events at exactly ``w``.

    Events after the window, and event types absent from ``vocab``, are dropped.
    """
    if agg not in AGGREGATIONS:
        raise ValueError(f"unknown aggregation {agg!r}")
    window = resolve_window(stay, window_days)
    ends = bin_times(n_t, window)
    n_e = len(vocab)
    x = np.zeros((n_e, n_t))
    m = np.zeros((n_e, n_t), dtype=np.int64)
    unknown = 0
    for ev in stay.events:
        if ev.time_days > window:
            continue
        row = vocab.get(ev.event_type)
        if row is None:
            unknown += 1
            continue
        j = min(int(np.searchsorted(ends, ev.time_days, side="right")), n_t - 1)
        c = m[row, j]
        if c == 0 or agg == "last":
            x[row, j] = ev.value
        elif agg == "mean":
            x[row, j] += ev.value
        elif agg == "max":
            x[row, j] = max(x[row, j], ev.value)
        else:
            x[row, j] = min(x[row, j], ev.value)
        m[row, j] = c + 1
    if agg == "mean":
        np.divide(x, m, out=x, where=m > 0)
    if unknown:
        log.warning("stay %s: dropped %d events of types outside the vocabulary", stay.stay_id, unknown)
    return BinnedStay(x, m, ends, window)


def export_csv(binned: BinnedStay, prefix) -> tuple[Path, Path]:
    """Write ``<prefix>_x.csv`` and ``<prefix>_m.csv`` for inspection."""
    prefix = Path(prefix)
    px = prefix.with_name(prefix.name + "_x.csv")
    pm = prefix.with_name(prefix.name + "_m.csv")
    np.savetxt(px, binned.x, delimiter=",", fmt="%.9g")
    np.savetxt(pm, binned.m, delimiter=",", fmt="%d")
    return px, pm


@dataclass
class BinnedData:
    """A whole split stacked into arrays ready for batching."""

    x: np.ndarray  # (N, n_e, n_t)
    m: np.ndarray  # (N, n_e, n_t)
    times: np.ndarray  # (N, n_t + 1); last column is the window end, used by [REP]
    static: np.ndarray  # (N, n_static)
    labels: np.ndarray  # (N, n_labels)
    stay_ids: list[str]
    event_types: list[str]
    label_names: list[str]

    def __len__(self) -> int:
        return self.x.shape[0]

    def subset(self, idx) -> "BinnedData":
        idx = np.asarray(idx)
        return BinnedData(
            self.x[idx], self.m[idx], self.times[idx], self.static[idx], self.labels[idx],
            [self.stay_ids[i] for i in idx], self.event_types, self.label_names,
        )


def bin_dataset(
    stays: Sequence[PatientStay],
    vocab: Mapping[str, int],
    n_t: int = 32,
    window_days: float | str = 2.0,
    agg: str = "last",
    label_names: Sequence[str] | None = None,
    n_static: int | None = None,
) -> BinnedData:
    if label_names is None:
        label_names = list(dict.fromkeys(k for s in stays for k in s.labels))
    if n_static is None:
        n_static = stays[0].static.size if stays else 0
    n_e = len(vocab)
    N = len(stays)
    X = np.zeros((N, n_e, n_t))
    M = np.zeros((N, n_e, n_t), dtype=np.int64)
    times = np.zeros((N, n_t + 1))
    static = np.zeros((N, n_static))
    labels = np.zeros((N, len(label_names)))
    for i, stay in enumerate(stays):
        b = bin_stay(stay, vocab, n_t, window_days, agg)
        X[i], M[i] = b.x, b.m
        times[i, :n_t] = b.bin_end_days
        times[i, n_t] = b.window_days
        if stay.static.size != n_static:
            raise ValueError(f"stay {stay.stay_id}: expected {n_static} static values, got {stay.static.size}")
        static[i] = stay.static
        labels[i] = [stay.labels.get(k, 0.0) for k in label_names]
    types = sorted(vocab, key=vocab.get)
    return BinnedData(X, M, times, static, labels, [s.stay_id for s in stays], types, list(label_names))
