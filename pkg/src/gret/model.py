"""The full sequence-to-sequence model: embeddings, encoder, global-state
builder, decoder, fusion, output projection.  With all three feature flags
off this is exactly the baseline transformer, parameter for parameter."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, Tensor
from .config import ModelConfig
from .fusion import ContextGate, fuse_states
from .global_state import GlobalStateBuilder
from .nn import Dropout, Linear, ParamStore
from .transformer import Decoder, DecoderOutput, Encoder, EncoderOutput, positional_encoding

_IDENTITY_DROP = Dropout(0.0)
_PE_CACHE: dict = {}


def _pos_table(length: int, d_model: int) -> np.ndarray:
    key = (length, d_model)
    if key not in _PE_CACHE:
        _PE_CACHE[key] = positional_encoding(length, d_model)
    return _PE_CACHE[key]


class Model:
    def __init__(self, cfg: ModelConfig, store: ParamStore | None = None):
        cfg.validate()
        self.cfg = cfg
        self.store = store if store is not None else ParamStore(cfg.seed)
        s, d, v = self.store, cfg.d_model, cfg.vocab

        self.src_emb = s.ensure("embed.src", (v, d))
        if cfg.tie_embeddings:
            self.tgt_emb = s.alias("embed.tgt", "embed.src") if "embed.tgt" not in s \
                else s["embed.tgt"]
            self.out_proj = None  # logits = states @ emb^T
        else:
            self.tgt_emb = s.ensure("embed.tgt", (v, d))
            self.out_proj = Linear(s, "proj.out", d, v)

        self.encoder = Encoder(s, cfg)
        self.decoder = Decoder(s, cfg)
        self.globals = GlobalStateBuilder(s, cfg)
        self.gate = ContextGate(s, "gate", d) if cfg.gate else None

    # ------------------------------------------------------------------
    # forward pieces

    def _embed(self, table: Tensor, ids: np.ndarray, drop: Dropout) -> Tensor:
        ids = np.asarray(ids)
        x = ad.take_rows(table, ids) * np.sqrt(self.cfg.d_model)
        x = x + Tensor(_pos_table(ids.shape[-1], self.cfg.d_model))
        return drop(x)

    def encode(self, src_ids, src_mask, drop: Dropout = _IDENTITY_DROP) -> EncoderOutput:
        src_mask = np.asarray(src_mask, dtype=bool)
        enc = self.encoder(self._embed(self.src_emb, src_ids, drop), src_mask, drop)
        gs = self.globals(enc)
        if gs is not None:
            enc.global_state = gs.final
            enc.globals = gs
        return enc

    def decode_states(self, tgt_ids, enc: EncoderOutput, tgt_mask=None,
                      drop: Dropout = _IDENTITY_DROP) -> Tensor:
        return self.decoder(self._embed(self.tgt_emb, tgt_ids, drop), enc, tgt_mask, drop)

    def output_logits(self, states: Tensor) -> Tensor:
        if self.out_proj is not None:
            return self.out_proj(states)
        return states @ ad.transpose(self.src_emb, (1, 0))

    def decode_step(self, tgt_ids, enc: EncoderOutput, tgt_mask=None,
                    drop: Dropout = _IDENTITY_DROP) -> DecoderOutput:
        """Teacher-forced decode of a whole prefix: states, fusion, logits."""
        tgt_ids = np.asarray(tgt_ids)
        if tgt_ids.shape[-1] < 1:
            raise ContractError("decode_step: empty prefix")
        states = self.decode_states(tgt_ids, enc, tgt_mask, drop)
        fused, gate_out = fuse_states(states, enc.global_state, self.gate)
        logits = self.output_logits(fused)
        return DecoderOutput(last_layer=states, logits=logits,
                             fused=gate_out.fused if gate_out else None,
                             gate=gate_out.gate if gate_out else None)

    def forward(self, batch, drop: Dropout = _IDENTITY_DROP) -> DecoderOutput:
        enc = self.encode(batch.src, batch.src_mask, drop)
        return self.decode_step(batch.tgt_in, enc, batch.tgt_mask, drop)

    # ------------------------------------------------------------------
    # accounting

    def param_count(self) -> int:
        return self.store.size()

    def param_breakdown(self) -> dict[str, int]:
        groups: dict[str, int] = {}
        for name, t in self.store.unique_tensors().items():
            head = name.split(".", 1)[0]
            groups[head] = groups.get(head, 0) + t.data.size
        return dict(sorted(groups.items()))


def param_count(cfg: ModelConfig) -> tuple[int, dict[str, int]]:
    """Total scalar parameters for a config, plus a per-module breakdown."""
    model = Model(cfg, ParamStore(cfg.seed))
    return model.param_count(), model.param_breakdown()
