"""Flat ``key = value`` run configuration.

Blank lines and ``#`` comments are ignored; unknown keys are an error.
Every run writes its resolved configuration (all keys, defaults filled in)
next to its outputs.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

ABLATION_FLAGS = (
    "event_only",
    "time_only",
    "value_loss_only",
    "presence_loss_only",
    "mask_bins_only",
    "mask_events_only",
    "no_ssl",
    "first_layer_embed_only",
    "late_static_fusion",
)


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    d: int = 16
    L: int = 2
    n_t: int = 32
    n_heads: int = 4
    ffn_hidden: int = 512
    dropout: float = 0.1
    alpha: float = 1.0
    k_e: int = 1
    k_t: int = 1
    epochs: int = 300
    finetune_epochs: int = 30
    peak_lr: float = 1e-3
    finetune_lr: float = 5e-4
    warmup_steps: int = 100
    finetune_warmup_steps: int = 50
    weight_decay: float = 0.01
    batch_size: int = 32
    seed: int = 2020
    aggregation: str = "last"
    window_days: str = "2.0"
    top_k: int = 5
    normalize_static: bool = True
    share_embeddings: bool = True
    final_norm: bool = True
    labels: str = ""
    precision: str = "float32"
    event_only: bool = False
    time_only: bool = False
    value_loss_only: bool = False
    presence_loss_only: bool = False
    mask_bins_only: bool = False
    mask_events_only: bool = False
    no_ssl: bool = False
    first_layer_embed_only: bool = False
    late_static_fusion: bool = False

    def validate(self) -> "RunConfig":
        if self.precision not in ("float32", "float64"):
            raise ConfigError(f"precision must be float32 or float64, got {self.precision!r}")
        if self.aggregation not in ("last", "mean", "max", "min"):
            raise ConfigError(f"aggregation must be last/mean/max/min, got {self.aggregation!r}")
        if self.window_days != "auto":
            try:
                if float(self.window_days) <= 0:
                    raise ConfigError("window_days must be positive or 'auto'")
            except ValueError:
                raise ConfigError(f"window_days must be a number or 'auto', got {self.window_days!r}") from None
        for name in ("d", "n_t", "n_heads", "batch_size", "warmup_steps", "finetune_warmup_steps", "top_k"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.L < 0 or self.epochs < 0 or self.finetune_epochs < 1:
            raise ConfigError("L and epochs must be >= 0, finetune_epochs >= 1")
        if not 0 <= self.dropout < 1:
            raise ConfigError("dropout must lie in [0, 1)")
        if self.event_only and self.time_only:
            raise ConfigError("event_only and time_only are mutually exclusive")
        if self.value_loss_only and self.presence_loss_only:
            raise ConfigError("value_loss_only and presence_loss_only are mutually exclusive")
        if self.mask_bins_only and self.mask_events_only:
            raise ConfigError("mask_bins_only and mask_events_only are mutually exclusive")
        return self

    @property
    def window(self) -> float | str:
        return "auto" if self.window_days == "auto" else float(self.window_days)

    @property
    def variant(self) -> str:
        return "event_only" if self.event_only else "time_only" if self.time_only else "duett"

    @property
    def mask_counts(self) -> tuple[int, int]:
        k_e = 0 if self.mask_bins_only else self.k_e
        k_t = 0 if self.mask_events_only else self.k_t
        return k_e, k_t

    @property
    def loss_weights(self) -> tuple[float, float]:
        """(value weight, presence weight alpha)."""
        if self.value_loss_only:
            return 1.0, 0.0
        if self.presence_loss_only:
            return 0.0, self.alpha
        return 1.0, self.alpha

    def label_list(self) -> list[str] | None:
        names = [s.strip() for s in self.labels.split(",") if s.strip()]
        return names or None

    def with_flag(self, flag: str) -> "RunConfig":
        if flag not in ABLATION_FLAGS:
            raise ConfigError(f"unknown ablation variant {flag!r}")
        return dataclasses.replace(self, **{flag: True}).validate()

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            lines.append(f"{f.name} = {str(v).lower() if isinstance(v, bool) else v}")
        return "\n".join(lines) + "\n"


def _coerce(name: str, typ, raw: str):
    if typ in (bool, "bool"):
        low = raw.lower()
        if low in ("true", "1", "yes", "on"):
            return True
        if low in ("false", "0", "no", "off"):
            return False
        raise ConfigError(f"{name}: expected a boolean, got {raw!r}")
    conv = {"int": int, "float": float, "str": str}.get(typ, typ)
    try:
        return conv(raw)
    except ValueError:
        raise ConfigError(f"{name}: cannot parse {raw!r} as {getattr(conv, '__name__', conv)}") from None


def parse_config(text: str, **overrides) -> RunConfig:
    types = {f.name: f.type for f in fields(RunConfig)}
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in types:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        values[key] = _coerce(key, types[key], raw)
    values.update(overrides)
    return RunConfig(**values).validate()


def load_config(path) -> RunConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from None
    return parse_config(text)
