"""Encoder and decoder stacks.

The encoder keeps every layer's output (the global-state module consumes
all of them).  The decoder cross-attends the final encoder layer only.
Decoder layers follow the single-LN layout by default: the causal and
cross attention paths, each with its own residual, are summed and then
normalized once; the conventional per-sublayer LN stack sits behind
cfg.eq11_literal_ln = False.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import ContractError, Tensor
from .config import ModelConfig
from .nn import Dropout, FeedForward, LayerNorm, MultiHeadAttention, ParamStore

_IDENTITY_DROP = Dropout(0.0)


@dataclass
class EncoderOutput:
    layers: list  # H^1..H^M, each Tensor[..., I, d_model]
    pad_mask: np.ndarray  # bool [..., I]
    global_state: Tensor | None = None  # s^M, filled by the global-state module
    globals: object = None  # the full GlobalState (per-layer vectors, routing)

    @property
    def final(self) -> Tensor:
        return self.layers[-1]

    @property
    def depth(self) -> int:
        return len(self.layers)


@dataclass
class DecoderOutput:
    last_layer: Tensor  # [..., J, d_model]
    logits: Tensor  # [..., J, V]
    fused: Tensor | None = None  # gated states, present iff gate flag on
    gate: Tensor | None = None


def positional_encoding(length: int, d_model: int) -> np.ndarray:
    """Sinusoidal table [length, d_model]; even columns sine, odd cosine."""
    pos = np.arange(length, dtype=np.float64)[:, None]
    idx = np.arange(d_model, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, 2.0 * np.floor(idx / 2.0) / d_model)
    table = np.where(idx % 2 == 0, np.sin(angle), np.cos(angle))
    return table


class EncoderLayer:
    def __init__(self, store: ParamStore, name: str, cfg: ModelConfig):
        self.attn = MultiHeadAttention(store, f"{name}.attn", cfg.d_model, cfg.heads)
        self.ln_attn = LayerNorm(store, f"{name}.ln_attn", cfg.d_model)
        self.ffn = FeedForward(store, f"{name}.ffn", cfg.d_model, cfg.ffn_hidden, cfg.d_model)
        self.ln_ffn = LayerNorm(store, f"{name}.ln_ffn", cfg.d_model)

    def __call__(self, x: Tensor, pad_mask, drop: Dropout) -> Tensor:
        h = self.ln_attn(x + drop(self.attn(x, x, x, key_mask=pad_mask, drop=drop)))
        return self.ln_ffn(h + drop(self.ffn(h)))


class DecoderLayer:
    def __init__(self, store: ParamStore, name: str, cfg: ModelConfig):
        self.literal_ln = cfg.eq11_literal_ln
        self.self_attn = MultiHeadAttention(store, f"{name}.self", cfg.d_model, cfg.heads)
        self.cross_attn = MultiHeadAttention(store, f"{name}.cross", cfg.d_model, cfg.heads)
        self.ffn = FeedForward(store, f"{name}.ffn", cfg.d_model, cfg.ffn_hidden, cfg.d_model)
        self.ln_ffn = LayerNorm(store, f"{name}.ln_ffn", cfg.d_model)
        if self.literal_ln:
            self.ln_attn = LayerNorm(store, f"{name}.ln_attn", cfg.d_model)
        else:
            self.ln_self = LayerNorm(store, f"{name}.ln_self", cfg.d_model)
            self.ln_cross = LayerNorm(store, f"{name}.ln_cross", cfg.d_model)

    def __call__(self, x: Tensor, memory: Tensor, src_mask, tgt_mask, drop: Dropout) -> Tensor:
        if self.literal_ln:
            a = drop(self.self_attn(x, x, x, key_mask=tgt_mask, causal=True, drop=drop))
            b = drop(self.cross_attn(x, memory, memory, key_mask=src_mask, drop=drop))
            h = self.ln_attn((x + a) + (x + b))
        else:
            h = self.ln_self(x + drop(self.self_attn(x, x, x, key_mask=tgt_mask,
                                                     causal=True, drop=drop)))
            h = self.ln_cross(h + drop(self.cross_attn(h, memory, memory,
                                                       key_mask=src_mask, drop=drop)))
        return self.ln_ffn(h + drop(self.ffn(h)))


class Encoder:
    def __init__(self, store: ParamStore, cfg: ModelConfig):
        self.layers = [EncoderLayer(store, f"enc.l{m}", cfg) for m in range(cfg.enc_layers)]

    def __call__(self, x: Tensor, pad_mask, drop: Dropout = _IDENTITY_DROP) -> EncoderOutput:
        pad_mask = np.asarray(pad_mask, dtype=bool)
        if not pad_mask.any(axis=-1).all():
            raise ContractError("encode: sequence with no unmasked token")
        outputs = []
        for layer in self.layers:
            x = layer(x, pad_mask, drop)
            outputs.append(x)
        return EncoderOutput(layers=outputs, pad_mask=pad_mask)


class Decoder:
    def __init__(self, store: ParamStore, cfg: ModelConfig):
        self.layers = [DecoderLayer(store, f"dec.l{n}", cfg) for n in range(cfg.dec_layers)]

    def __call__(self, y: Tensor, enc: EncoderOutput, tgt_mask=None,
                 drop: Dropout = _IDENTITY_DROP) -> Tensor:
        memory = enc.final  # cross-attention reads the last encoder layer only
        for layer in self.layers:
            y = layer(y, memory, enc.pad_mask, tgt_mask, drop)
        return y
