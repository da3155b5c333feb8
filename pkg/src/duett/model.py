"""The dual event/time Transformer encoder.

The representation tensor has shape (B, R, C, d) with R = n_e + 1 rows
(event types plus the static row) and C = n_t + 1 columns (time bins plus
[REP]).  An event sublayer treats each row, flattened to C*d, as one token;
a time sublayer treats each column, flattened to R*d, as one token.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .embedding import InputEmbedding, TimeCVE
from .nn import Module, ScaleNorm, TransformerSublayer, normal_param
from .rng import make_rng
from .tensor import Tensor

VARIANTS = ("duett", "event_only", "time_only")


@dataclass
class ModelConfig:
    n_events: int
    n_bins: int
    n_static: int
    d: int = 16
    n_layers: int = 2
    n_heads: int = 4
    ffn_hidden: int = 512
    dropout: float = 0.1
    variant: str = "duett"
    share_embeddings: bool = True
    first_layer_embed_only: bool = False
    late_static_fusion: bool = False
    final_norm: bool = True

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}")
        if self.n_layers < 0:
            raise ValueError("n_layers must be >= 0")

    @property
    def n_rows(self) -> int:
        return self.n_events + (0 if self.late_static_fusion else 1)

    @property
    def n_cols(self) -> int:
        return self.n_bins + 1

    @property
    def sublayer_kinds(self) -> tuple[str, str]:
        return {"duett": ("event", "time"), "event_only": ("event", "event"), "time_only": ("time", "time")}[
            self.variant
        ]

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Counters:
    """Per-forward instrumentation: one entry per sublayer, in execution order."""

    kinds: list = field(default_factory=list)
    attention_dims: list = field(default_factory=list)
    flops: list = field(default_factory=list)


def event_sublayer(psi: Tensor, p_e: Tensor, block: TransformerSublayer, rng=None, counter=None) -> Tensor:
    """Rows as tokens: flatten each row, add its event embedding, transform."""
    B, R, C, d = psi.shape
    tokens = psi.reshape(B, R, C * d)
    if p_e is not None:
        tokens = tokens + p_e
    return block(tokens, rng, counter).reshape(B, R, C, d)


def time_sublayer(omega: Tensor, p_t: Tensor, block: TransformerSublayer, rng=None, counter=None) -> Tensor:
    """Columns as tokens; ``p_t`` is (B, C, R*d) from the time embedding."""
    B, R, C, d = omega.shape
    tokens = omega.transpose(0, 2, 1, 3).reshape(B, C, R * d)
    if p_t is not None:
        tokens = tokens + p_t
    out = block(tokens, rng, counter)
    return out.reshape(B, C, R, d).transpose(0, 2, 1, 3)


class DuETT(Module):
    def __init__(self, cfg: ModelConfig, seed: int = 2020):
        self.cfg = cfg
        rng = make_rng(seed, "init")
        R, C, d = cfg.n_rows, cfg.n_cols, cfg.d
        kinds = set(cfg.sublayer_kinds)
        n_tables = 1 if (cfg.share_embeddings or cfg.first_layer_embed_only) else max(cfg.n_layers, 1)
        self.embedding = InputEmbedding(cfg.n_static, d, rng)
        if "event" in kinds:
            self.event_embed = [_EventTable(R, C * d, rng) for _ in range(n_tables)]
        if "time" in kinds:
            self.time_embed = [TimeCVE(R * d, rng) for _ in range(n_tables)]
        self.layers = [
            [
                TransformerSublayer(C * d if k == "event" else R * d, cfg.n_heads, cfg.ffn_hidden, rng, cfg.dropout)
                for k in cfg.sublayer_kinds
            ]
            for _ in range(cfg.n_layers)
        ]
        self.final_norm = ScaleNorm(d) if cfg.final_norm else None
        self.last_counters = Counters()

    def _children(self):
        yield from super()._children()
        for i, layer in enumerate(self.layers):
            for j, sub in enumerate(layer):
                yield f"layers.{i}.{j}", sub

    def _tables(self, layer: int):
        cfg = self.cfg
        if cfg.first_layer_embed_only and layer > 0:
            return None, None
        k = 0 if (cfg.share_embeddings or cfg.first_layer_embed_only) else layer
        ev = self.event_embed[k] if hasattr(self, "event_embed") else None
        tm = self.time_embed[k] if hasattr(self, "time_embed") else None
        return ev, tm

    def forward(self, phi: Tensor, times: np.ndarray, rng=None) -> Tensor:
        """Z from Phi; ``times`` is (B, C) days, one value per column."""
        cfg = self.cfg
        B, R, C, d = phi.shape
        if (R, C, d) != (cfg.n_rows, cfg.n_cols, cfg.d):
            raise ValueError(f"input shape {(R, C, d)} does not match model {(cfg.n_rows, cfg.n_cols, cfg.d)}")
        counters = Counters()
        psi = phi
        for li, layer in enumerate(self.layers):
            ev_table, cve = self._tables(li)
            p_t = cve(times) if cve is not None else None
            for kind, block in zip(cfg.sublayer_kinds, layer):
                attn_log: list = []
                if kind == "event":
                    p_e = ev_table.table if ev_table is not None else None
                    psi = event_sublayer(psi, p_e, block, rng, attn_log)
                    counters.flops.append(block.flops(R) * B)
                else:
                    psi = time_sublayer(psi, p_t, block, rng, attn_log)
                    counters.flops.append(block.flops(C) * B)
                counters.kinds.append(kind)
                counters.attention_dims.extend(attn_log)
        self.last_counters = counters
        if self.final_norm is not None:
            psi = self.final_norm(psi)
        return psi

    def encode(self, x, m, static, times, mask_spec=None, rng=None):
        """Embed, optionally mask, and run the encoder.

        Returns ``(Z, static_emb)``; ``static_emb`` is kept for late fusion.
        """
        from .ssl import apply_mask

        emb = self.embedding
        static_emb = emb.embed_static(static)
        phi = emb.assemble(x, m, static_emb=static_emb, static_row=not self.cfg.late_static_fusion)
        if mask_spec is not None:
            phi = apply_mask(phi, mask_spec, emb.mask_token, n_events=self.cfg.n_events, n_bins=self.cfg.n_bins)
        return self.forward(phi, times, rng), static_emb

    def parameter_report(self) -> dict[str, int]:
        """Parameter counts grouped by top-level component."""
        out: dict[str, int] = {}
        for name, p in self.named_parameters():
            if name.startswith("layers."):
                i, j = name.split(".")[1:3]
                key = f"layers.{i}.{self.cfg.sublayer_kinds[int(j)]}{j}"
            else:
                key = name.split(".")[0]
            out[key] = out.get(key, 0) + p.size
        return out


class _EventTable(Module):
    def __init__(self, n_rows: int, dim: int, rng):
        self.table = normal_param(rng, (n_rows, dim))


def model_config_from_dict(d: dict) -> ModelConfig:
    return ModelConfig(**d)
