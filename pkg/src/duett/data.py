"""Patient-stay records: parsing, robust normalization, splits, synthetic data.

A stay is a static vector, a time-sorted list of ``(type, time_days, value)``
events and a label map.  On disk each stay is one JSON object per line::

    {"stay_id": "s1", "static": [0.3, 1.0],
     "events": [{"type": "hr", "time_days": 0.1, "value": 81.0}],
     "labels": {"mortality": 0}}
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence, TextIO

import numpy as np

from .rng import make_rng

log = logging.getLogger(__name__)

RECORD_FIELDS = frozenset({"stay_id", "static", "events", "labels"})
EVENT_FIELDS = frozenset({"type", "time_days", "value"})


class DataError(ValueError):
    """Malformed or unusable input data."""


@dataclass(frozen=True)
class EventTriplet:
    event_type: str
    time_days: float
    value: float


@dataclass
class PatientStay:
    stay_id: str
    static: np.ndarray
    events: list[EventTriplet]
    labels: dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        self.static = np.asarray(self.static, dtype=np.float64)
        # stable sort: equal timestamps keep input order
        self.events = sorted(self.events, key=lambda e: e.time_days)

    def to_record(self) -> dict:
        return {
            "stay_id": self.stay_id,
            "static": [float(v) for v in self.static],
            "events": [{"type": e.event_type, "time_days": e.time_days, "value": e.value} for e in self.events],
            "labels": dict(self.labels),
        }


def _parse_record(obj, lineno: int) -> PatientStay:
    if not isinstance(obj, dict):
        raise DataError(f"line {lineno}: record must be a JSON object")
    unknown = set(obj) - RECORD_FIELDS
    if unknown:
        raise DataError(f"line {lineno}: unknown field(s) {sorted(unknown)}")
    if "stay_id" not in obj:
        raise DataError(f"line {lineno}: missing 'stay_id'")
    events = []
    for k, ev in enumerate(obj.get("events", [])):
        if not isinstance(ev, dict):
            raise DataError(f"line {lineno}: event {k} is not an object")
        bad = set(ev) - EVENT_FIELDS
        if bad:
            raise DataError(f"line {lineno}: unknown event field(s) {sorted(bad)}")
        try:
            t = float(ev["time_days"])
            v = float(ev["value"])
            et = str(ev["type"])
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"line {lineno}: malformed event {k}: {exc}") from None
        if t < 0 or not math.isfinite(t):
            raise DataError(f"line {lineno}: negative or non-finite time {t}")
        if not math.isfinite(v):
            raise DataError(f"line {lineno}: non-finite value in event {k}")
        events.append(EventTriplet(et, t, v))
    try:
        static = np.asarray(obj.get("static", []), dtype=np.float64)
        labels = {str(k): float(v) for k, v in obj.get("labels", {}).items()}
    except (TypeError, ValueError, AttributeError) as exc:
        raise DataError(f"line {lineno}: malformed static/labels: {exc}") from None
    if static.ndim != 1 or not np.all(np.isfinite(static)):
        raise DataError(f"line {lineno}: static must be a flat list of finite numbers")
    return PatientStay(str(obj["stay_id"]), static, events, labels)


def parse_stays(lines: Iterable[str]) -> tuple[list[PatientStay], dict[str, int]]:
    """Parse a line-delimited record stream.

    Returns the stays and a vocabulary mapping event type to a 0-based row
    index, assigned in first-seen order.  Blank lines are skipped.
    """
    stays: list[PatientStay] = []
    vocab: dict[str, int] = {}
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DataError(f"line {lineno}: invalid JSON ({exc.msg})") from None
        stay = _parse_record(obj, lineno)
        for ev in stay.events:
            vocab.setdefault(ev.event_type, len(vocab))
        stays.append(stay)
    return stays, vocab


def read_stays(path) -> tuple[list[PatientStay], dict[str, int]]:
    with open(path, encoding="utf-8") as fh:
        return parse_stays(fh)


def write_stays(stays: Iterable[PatientStay], fh: TextIO) -> None:
    for stay in stays:
        fh.write(json.dumps(stay.to_record()) + "\n")


# -- normalization --------------------------------------------------------------------


@dataclass
class TypeStats:
    median: float = 0.0
    mad: float = 0.0
    mean: float = 0.0
    std: float = 1.0
    present: bool = True

    @property
    def clip_bounds(self) -> tuple[float, float] | None:
        if self.mad == 0:
            return None
        return self.median - 3 * self.mad, self.median + 3 * self.mad


@dataclass
class NormStats:
    types: dict[str, TypeStats]
    static_mean: np.ndarray
    static_std: np.ndarray
    normalize_static: bool = True

    def to_dict(self) -> dict:
        return {
            "types": {k: vars(v) for k, v in self.types.items()},
            "static_mean": [float(v) for v in self.static_mean],
            "static_std": [float(v) for v in self.static_std],
            "normalize_static": self.normalize_static,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NormStats":
        return cls(
            types={k: TypeStats(**v) for k, v in d["types"].items()},
            static_mean=np.asarray(d["static_mean"], dtype=np.float64),
            static_std=np.asarray(d["static_std"], dtype=np.float64),
            normalize_static=bool(d.get("normalize_static", True)),
        )


def robust_type_stats(values: np.ndarray) -> TypeStats:
    """Median/MAD clip bounds, then mean/std of the clipped values."""
    values = np.asarray(values, dtype=np.float64)
    med = float(np.median(values))
    mad = float(np.median(np.abs(values - med)))
    if mad > 0:
        values = np.clip(values, med - 3 * mad, med + 3 * mad)
    std = float(values.std())
    return TypeStats(median=med, mad=mad, mean=float(values.mean()), std=std if std > 0 else 1.0)


def fit_norm(
    train_stays: Sequence[PatientStay],
    vocab: Iterable[str] | None = None,
    normalize_static: bool = True,
) -> NormStats:
    if not train_stays:
        raise DataError("cannot fit normalization on an empty training split")
    by_type: dict[str, list[float]] = {t: [] for t in (vocab or [])}
    for stay in train_stays:
        for ev in stay.events:
            by_type.setdefault(ev.event_type, []).append(ev.value)
    types = {}
    for name, vals in by_type.items():
        types[name] = robust_type_stats(np.array(vals)) if vals else TypeStats(present=False)
    static = np.stack([s.static for s in train_stays]) if train_stays[0].static.size else np.zeros((len(train_stays), 0))
    s_std = static.std(axis=0)
    s_std[s_std == 0] = 1.0
    return NormStats(types, static.mean(axis=0), s_std, normalize_static)


def apply_norm(stay: PatientStay, stats: NormStats) -> PatientStay:
    """Clip each value to its type's MAD bounds, then z-score it."""
    events = []
    for ev in stay.events:
        ts = stats.types.get(ev.event_type)
        if ts is None or not ts.present:
            log.warning("event type %r has no training statistics; passing value through", ev.event_type)
            events.append(ev)
            continue
        v = ev.value
        bounds = ts.clip_bounds
        if bounds is not None:
            v = min(max(v, bounds[0]), bounds[1])
        events.append(EventTriplet(ev.event_type, ev.time_days, (v - ts.mean) / ts.std))
    static = stay.static
    if stats.normalize_static and static.size:
        static = (static - stats.static_mean) / stats.static_std
    return PatientStay(stay.stay_id, static, events, dict(stay.labels))


def split(
    stays: Sequence[PatientStay], fractions=(0.70, 0.15, 0.15), seed: int = 2020
) -> tuple[list[PatientStay], list[PatientStay], list[PatientStay]]:
    """Seeded stay-level train/val/test partition."""
    if len(stays) < 3:
        raise DataError("need at least 3 stays to split")
    if len(fractions) != 3 or not math.isclose(sum(fractions), 1.0, abs_tol=1e-9) or min(fractions) < 0:
        raise ValueError(f"fractions must be three non-negative numbers summing to 1, got {fractions}")
    n = len(stays)
    order = make_rng(seed, "split").permutation(n)
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    idx = [order[:n_train], order[n_train : n_train + n_val], order[n_train + n_val :]]
    return tuple([stays[i] for i in sorted(part)] for part in idx)


# -- synthetic generator ----------------------------------------------------------------


@dataclass(frozen=True)
class Link:
    """Target value = weight * source value ``lag`` bins earlier (+ noise)."""

    source: int
    target: int
    lag: int
    weight: float


@dataclass(frozen=True)
class LabelRule:
    """P(y=1) = sigmoid(bias + weight * mean latent of ``events`` over the last ``tail`` fraction of bins)."""

    name: str = "outcome"
    events: tuple[int, ...] = (0,)
    weight: float = 2.0
    bias: float = 0.0
    tail: float = 0.25


@dataclass(frozen=True)
class SynthConfig:
    n_events: int = 12
    n_static: int = 4
    n_stays: int = 1000
    window_days: float = 2.0
    n_bins: int = 16
    sparsity: float | tuple[float, ...] = 0.5
    links: tuple[Link, ...] = ()
    noise: float = 0.1
    ar_coef: float = 0.8
    static_effect: float = 0.5
    extra_events: float = 0.3
    measurement_noise: float = 0.0
    random_scales: bool = True
    label_rules: tuple[LabelRule, ...] = (LabelRule(),)

    def sparsity_vector(self) -> np.ndarray:
        if isinstance(self.sparsity, (int, float)):
            return np.full(self.n_events, float(self.sparsity))
        return np.asarray(self.sparsity, dtype=np.float64)

    def event_names(self) -> list[str]:
        return [f"ev{i:02d}" for i in range(self.n_events)]

    def validate(self) -> None:
        if self.n_events < 1 or self.n_bins < 1 or self.window_days <= 0 or self.n_stays < 0:
            raise ValueError("n_events, n_bins and window_days must be positive")
        sp = self.sparsity_vector()
        if sp.shape != (self.n_events,) or np.any(sp <= 0) or np.any(sp > 1):
            raise ValueError("sparsity must lie in (0, 1] for every event type")
        for ln in self.links:
            if not (0 <= ln.lag < self.n_bins):
                raise ValueError(f"link lag {ln.lag} outside [0, {self.n_bins})")
            if not math.isfinite(ln.weight):
                raise ValueError("link weight must be finite")
            if not (0 <= ln.source < self.n_events and 0 <= ln.target < self.n_events):
                raise ValueError(f"link {ln} refers to an unknown event index")
            if ln.source == ln.target and ln.lag == 0:
                raise ValueError("a same-bin self link is undefined")
        for rule in self.label_rules:
            if not all(0 <= e < self.n_events for e in rule.events):
                raise ValueError(f"label rule {rule.name} refers to an unknown event index")


def synth_latents(cfg: SynthConfig, rng: np.random.Generator, static: np.ndarray) -> np.ndarray:
    """Latent (n_events, n_bins) trajectories for one stay."""
    max_lag = max((ln.lag for ln in cfg.links), default=0)
    T = cfg.n_bins + max_lag
    phi = cfg.ar_coef
    z = np.empty((cfg.n_events, T))
    z[:, 0] = rng.normal(size=cfg.n_events)
    innov = rng.normal(size=(cfg.n_events, T)) * math.sqrt(1 - phi * phi)
    for t in range(1, T):
        z[:, t] = phi * z[:, t - 1] + innov[:, t]
    if cfg.n_static:
        offsets = cfg.static_effect * static[np.arange(cfg.n_events) % cfg.n_static]
        z += offsets[:, None]
    targets = list(dict.fromkeys(ln.target for ln in cfg.links))
    for tgt in targets:
        acc = np.zeros(T)
        for ln in cfg.links:
            if ln.target != tgt:
                continue
            src = z[ln.source]
            acc[ln.lag :] += ln.weight * src[: T - ln.lag]
            acc[: ln.lag] += ln.weight * src[0]
        z[tgt] = acc + cfg.noise * rng.normal(size=T)
    return z[:, max_lag:]


def generate_synthetic(cfg: SynthConfig, seed: int) -> list[PatientStay]:
    """Stays whose event values follow latent AR(1) trajectories with planted links.

    Links are applied in listed order, so a link may read from an earlier
    link's target.  Each (type, bin) is observed with probability
    ``sparsity``; an observed bin holds ``1 + Poisson(extra_events)`` events
    at uniform times inside the bin, all carrying that bin's latent value.
    """
    cfg.validate()
    names = cfg.event_names()
    sp = cfg.sparsity_vector()
    glob = make_rng(seed, "synth-scales")
    if cfg.random_scales:
        loc = glob.uniform(-5, 50, size=cfg.n_events)
        scale = glob.uniform(0.5, 10, size=cfg.n_events)
    else:
        loc = np.zeros(cfg.n_events)
        scale = np.ones(cfg.n_events)
    width = cfg.window_days / cfg.n_bins
    stays = []
    for idx in range(cfg.n_stays):
        rng = make_rng(seed, "synth-stay", idx)
        static = rng.normal(size=cfg.n_static)
        z = synth_latents(cfg, rng, static)
        observed = rng.random(z.shape) < sp[:, None]
        events = []
        for t in range(cfg.n_bins):
            for e in np.flatnonzero(observed[:, t]):
                k = 1 + int(rng.poisson(cfg.extra_events)) if cfg.extra_events > 0 else 1
                times = np.sort((t + rng.random(k)) * width)
                for tm in times:
                    v = z[e, t] + cfg.measurement_noise * rng.normal() if cfg.measurement_noise else z[e, t]
                    events.append(EventTriplet(names[e], float(min(tm, cfg.window_days)), float(loc[e] + scale[e] * v)))
        labels = {}
        for rule in cfg.label_rules:
            n_tail = max(1, int(round(rule.tail * cfg.n_bins)))
            signal = z[list(rule.events), -n_tail:].mean()
            p = 1.0 / (1.0 + math.exp(-(rule.bias + rule.weight * signal)))
            labels[rule.name] = float(rng.random() < p)
        stays.append(PatientStay(f"s{idx:05d}", static, events, labels))
    return stays
