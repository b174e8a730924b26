"""Synthetic sequence tasks and batch assembly.

Three tasks over a shared payload alphabet (ids 4..vocab-1; 0-3 reserved):
copy, reverse, and toy-translate (a fixed bijective token map composed with
swapping adjacent pairs at even offsets, so getting the output right needs
more than local copying).

Every (spec, split, index) names one pair, deterministically.  A sequence
belongs to a split by the hash bucket of its source tokens, which keeps the
test split disjoint from train by construction; generation rejection-samples
inside a per-index RNG stream until the bucket matches.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from .autodiff import ContractError
from .config import BOS, EOS, NUM_SPECIALS, PAD, ConfigError

KINDS = ("copy", "reverse", "toy-translate")

_SPLIT_CODE = {"train": 0, "valid": 1, "test": 2}
_BUCKETS = 20
_SPLIT_BUCKETS = {"train": range(0, 18), "valid": range(18, 19), "test": range(19, 20)}


@dataclass(frozen=True)
class TaskSpec:
    kind: str = "copy"
    vocab: int = 20
    len_min: int = 2
    len_max: int = 10
    train_size: int = 2000
    valid_size: int = 100
    test_size: int = 100
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"task kind: unknown {self.kind!r}, expected one of {KINDS}")
        if self.vocab < 10:
            raise ConfigError(f"task vocab: must be >= 10, got {self.vocab}")
        if self.len_min < 2 or self.len_max < self.len_min:
            raise ConfigError(f"task lengths: need 2 <= len_min <= len_max, "
                              f"got [{self.len_min}, {self.len_max}]")
        payload = self.vocab - NUM_SPECIALS
        space = sum(payload ** L for L in range(self.len_min, self.len_max + 1))
        total = self.train_size + self.valid_size + self.test_size
        if total > space:
            raise ConfigError(f"task corpus: {total} pairs requested but only "
                              f"{space} unique sequences exist")

    def size_of(self, split: str) -> int:
        return {"train": self.train_size, "valid": self.valid_size,
                "test": self.test_size}[split]


def _bucket(tokens) -> int:
    digest = hashlib.sha256(np.asarray(tokens, dtype=np.int64).tobytes()).digest()
    return int.from_bytes(digest[:8], "little") % _BUCKETS


def source_for(spec: TaskSpec, split: str, index: int) -> np.ndarray:
    """Deterministic source sequence for (spec, split, index)."""
    rng = np.random.default_rng([spec.seed, _SPLIT_CODE[split], index])
    want = _SPLIT_BUCKETS[split]
    for _ in range(100000):
        length = int(rng.integers(spec.len_min, spec.len_max + 1))
        seq = rng.integers(NUM_SPECIALS, spec.vocab, size=length, dtype=np.int64)
        if _bucket(seq) in want:
            return seq
    raise ContractError(f"gen_task: could not draw a {split} sequence "
                        f"(degenerate spec {spec})")


def token_map(spec: TaskSpec) -> np.ndarray:
    """The toy-translate bijection over payload ids, fixed by the task seed."""
    rng = np.random.default_rng([spec.seed, 777])
    perm = rng.permutation(spec.vocab - NUM_SPECIALS)
    table = np.arange(spec.vocab, dtype=np.int64)
    table[NUM_SPECIALS:] = perm + NUM_SPECIALS
    return table


def target_for(spec: TaskSpec, src: np.ndarray) -> np.ndarray:
    if spec.kind == "copy":
        return src.copy()
    if spec.kind == "reverse":
        return src[::-1].copy()
    out = src.copy()
    for i in range(0, len(out) - 1, 2):  # swap adjacent pairs at even offsets
        out[i], out[i + 1] = out[i + 1], out[i]
    return token_map(spec)[out]


def pair_for(spec: TaskSpec, split: str, index: int):
    src = source_for(spec, split, index)
    return src, target_for(spec, src)


def corpus(spec: TaskSpec, split: str) -> list:
    return [pair_for(spec, split, i) for i in range(spec.size_of(split))]


# ---------------------------------------------------------------------------
# batching


@dataclass
class Batch:
    src: np.ndarray  # [B, I] with EOS appended, PAD after
    src_mask: np.ndarray  # bool [B, I]
    tgt_in: np.ndarray  # [B, J]: BOS + target
    tgt_out: np.ndarray  # [B, J]: target + EOS
    tgt_mask: np.ndarray  # bool [B, J]

    @property
    def size(self) -> int:
        return self.src.shape[0]


def make_batch(pairs) -> Batch:
    """Pad sources (payload + EOS) and targets (BOS-led in, EOS-ended out)."""
    if not pairs:
        raise ContractError("make_batch: empty batch")
    B = len(pairs)
    I = max(len(s) for s, _ in pairs) + 1  # room for EOS
    J = max(len(t) for _, t in pairs) + 1  # room for BOS/EOS shift
    src = np.full((B, I), PAD, dtype=np.int64)
    src_mask = np.zeros((B, I), dtype=bool)
    tgt_in = np.full((B, J), PAD, dtype=np.int64)
    tgt_out = np.full((B, J), PAD, dtype=np.int64)
    tgt_mask = np.zeros((B, J), dtype=bool)
    for b, (s, t) in enumerate(pairs):
        src[b, :len(s)] = s
        src[b, len(s)] = EOS
        src_mask[b, :len(s) + 1] = True
        tgt_in[b, 0] = BOS
        tgt_in[b, 1:len(t) + 1] = t
        tgt_out[b, :len(t)] = t
        tgt_out[b, len(t)] = EOS
        tgt_mask[b, :len(t) + 1] = True
    return Batch(src, src_mask, tgt_in, tgt_out, tgt_mask)
