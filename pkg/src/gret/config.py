"""Model configuration, validation, and the two hashes derived from it:
a full-config hash for experiment bookkeeping and a 32-byte architecture
fingerprint for checkpoint compatibility."""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass

# reserved token ids, shared by every task and model
BOS, EOS, PAD, UNK = 0, 1, 2, 3
NUM_SPECIALS = 4


class ConfigError(ValueError):
    """Invalid configuration; message names the offending field."""


@dataclass
class ModelConfig:
    d_model: int = 32
    ffn_hidden: int = 128
    heads: int = 4
    enc_layers: int = 2
    dec_layers: int = 2
    vocab: int = 20

    capsules: int = 8
    routing_iters: int = 3
    d_cap: int | None = None  # None means d_model

    capsule: bool = False
    aggregate: bool = False
    gate: bool = False

    dropout: float = 0.0
    label_smoothing: float = 0.0
    warmup_steps: int = 400
    seed: int = 0
    eq11_literal_ln: bool = True
    tie_embeddings: bool = False

    # architecture fields whose values fix the shared (non-capsule)
    # parameter shapes; the checkpoint fingerprint hashes exactly these
    ARCH_FIELDS = ("d_model", "ffn_hidden", "heads", "enc_layers", "dec_layers",
                   "vocab", "eq11_literal_ln", "tie_embeddings")

    def __post_init__(self):
        self.validate()

    @property
    def cap_width(self) -> int:
        return self.d_model if self.d_cap is None else self.d_cap

    @property
    def flags(self) -> frozenset:
        return frozenset(f for f in ("capsule", "aggregate", "gate") if getattr(self, f))

    def validate(self):
        positive = ("d_model", "ffn_hidden", "heads", "enc_layers", "dec_layers",
                    "vocab", "capsules", "routing_iters", "warmup_steps")
        for field in positive:
            if getattr(self, field) < 1:
                raise ConfigError(f"{field}: must be >= 1, got {getattr(self, field)}")
        if self.d_cap is not None and self.d_cap < 1:
            raise ConfigError(f"d_cap: must be >= 1 or None, got {self.d_cap}")
        if self.d_model % self.heads != 0:
            raise ConfigError(f"heads: {self.heads} does not divide d_model {self.d_model}")
        if self.vocab <= NUM_SPECIALS:
            raise ConfigError(f"vocab: must exceed the {NUM_SPECIALS} reserved ids, got {self.vocab}")
        if not 0.0 <= self.label_smoothing <= 0.3:
            raise ConfigError(f"label_smoothing: must be in [0, 0.3], got {self.label_smoothing}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout: must be in [0, 1), got {self.dropout}")
        if self.seed < 0:
            raise ConfigError(f"seed: must be >= 0, got {self.seed}")

    def replace(self, **kwargs) -> "ModelConfig":
        return dataclasses.replace(self, **kwargs)

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)

    def arch_fingerprint(self) -> bytes:
        """32-byte digest over the fields that fix shared parameter shapes.

        Capsule-only fields are deliberately excluded so a baseline
        checkpoint loads into a capsule-flagged config (two-phase training);
        capsule parameter shapes are still checked tensor-by-tensor at load.
        """
        text = ";".join(f"{name}={getattr(self, name)}" for name in self.ARCH_FIELDS)
        return hashlib.sha256(text.encode("utf-8")).digest()

    def config_hash(self) -> str:
        """Short hex digest over every field; identifies an experiment cell."""
        items = sorted(self.as_dict().items())
        text = ";".join(f"{k}={v}" for k, v in items)
        return hashlib.sha256(text.encode("utf-8")).hexdigest()[:12]

    @classmethod
    def paper_scale(cls, **overrides) -> "ModelConfig":
        """The published-system shape: 6+6 layers at width 512, 32K vocab.

        Embeddings are tied three ways (the only layout that lands near the
        published baseline size) and capsules are 64 wide (the published
        total admits no full-width per-capsule projections).
        """
        base = dict(d_model=512, ffn_hidden=2048, heads=8, enc_layers=6, dec_layers=6,
                    vocab=32000, capsules=32, routing_iters=3, d_cap=64,
                    dropout=0.1, label_smoothing=0.1, warmup_steps=4000,
                    tie_embeddings=True)
        base.update(overrides)
        return cls(**base)
