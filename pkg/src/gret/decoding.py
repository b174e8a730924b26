"""Beam search with length-normalized scoring.

The source is encoded once; its final encoder states and global state are
broadcast across the live hypotheses each step, so the global state is
never recomputed during the search.  Each step keeps the top `beam` joint
expansions; those ending in EOS retire to a finished pool scored by
sum-of-log-probs / length^alpha.  Ties break by sort stability over
(hypothesis index, token id), keeping the search fully deterministic,
and with beam 1 the search reproduces greedy decoding exactly.
"""

from __future__ import annotations

import numpy as np

from .autodiff import ContractError, Tensor, no_grad
from .config import BOS, EOS
from .model import Model
from .transformer import EncoderOutput

DEFAULT_ALPHA = 0.6


def _log_softmax_rows(x: np.ndarray) -> np.ndarray:
    shift = x.max(axis=-1, keepdims=True)
    z = x - shift
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def _tile_encoding(enc: EncoderOutput, n: int) -> EncoderOutput:
    """Broadcast a single-sequence encoding across n hypotheses."""
    final = enc.final
    tiled = Tensor(np.broadcast_to(final.data, (n,) + final.data.shape[-2:]).copy())
    out = EncoderOutput(layers=[tiled],
                        pad_mask=np.broadcast_to(enc.pad_mask, (n,) + enc.pad_mask.shape[-1:]))
    if enc.global_state is not None:
        s = enc.global_state
        out.global_state = Tensor(np.broadcast_to(s.data, (n,) + s.data.shape[-1:]).copy())
    return out


def beam_decode(model: Model, source, beam: int, max_len: int,
                alpha: float = DEFAULT_ALPHA) -> list:
    """Decode one source (payload token ids, no EOS) into payload ids.

    Returns the highest-scoring finished hypothesis, or the best live one
    if nothing emits EOS within max_len steps.
    """
    if beam < 1:
        raise ContractError(f"beam_decode: beam must be >= 1, got {beam}")
    if max_len < 1:
        raise ContractError(f"beam_decode: max_len must be >= 1, got {max_len}")

    src = np.asarray(list(source) + [EOS], dtype=np.int64)
    with no_grad():
        enc = model.encode(src[None, :], np.ones((1, len(src)), dtype=bool))

        live = [[BOS]]
        live_scores = [0.0]
        done: list[tuple[float, list]] = []
        for _ in range(max_len):
            prefix = np.asarray(live, dtype=np.int64)  # [H, t]
            out = model.decode_step(prefix, _tile_encoding(enc, len(live)))
            logp = _log_softmax_rows(out.logits.data[:, -1, :])  # [H, V]
            joint = np.asarray(live_scores)[:, None] + logp

            flat = joint.ravel()
            order = np.argsort(-flat, kind="stable")
            next_live, next_scores = [], []
            for pos in order[:beam]:
                h, tok = divmod(int(pos), logp.shape[-1])
                seq = live[h] + [tok]
                if tok == EOS:
                    gen_len = len(seq) - 1  # generated tokens, EOS included
                    done.append((flat[pos] / gen_len ** alpha, seq))
                else:
                    next_live.append(seq)
                    next_scores.append(float(flat[pos]))
            live, live_scores = next_live, next_scores
            if not live or len(done) >= beam:
                break

        if not done:
            done = [(sc / (len(seq) - 1) ** alpha, seq)
                    for sc, seq in zip(live_scores, live)]
    best = max(done, key=lambda pair: (pair[0], -len(pair[1])))
    seq = best[1][1:]  # strip BOS
    return seq[:-1] if seq and seq[-1] == EOS else seq


def hypothesis_score(model: Model, source, tokens, alpha: float = DEFAULT_ALPHA) -> float:
    """Length-normalized log-probability of `tokens` (payload + implicit EOS)."""
    src = np.asarray(list(source) + [EOS], dtype=np.int64)
    full = list(tokens) + [EOS]
    with no_grad():
        enc = model.encode(src[None, :], np.ones((1, len(src)), dtype=bool))
        prefix = np.asarray([[BOS] + full[:-1]], dtype=np.int64)
        out = model.decode_step(prefix, enc)
        logp = _log_softmax_rows(out.logits.data[0])
    total = float(sum(logp[j, tok] for j, tok in enumerate(full)))
    return total / len(full) ** alpha
