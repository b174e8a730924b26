"""Neural-net building blocks on top of the tape: parameter store with
name-keyed deterministic init, linear/LN/attention/FFN/GRU, dropout, and
masked pooling.

Ops accept any number of leading batch axes; the trailing axes follow the
per-sequence shapes documented on each class.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, ShapeError, Tensor


class ParamStore:
    """Ordered name -> Tensor registry.

    Every draw depends only on (seed, name), never on creation order, so
    two stores with the same seed agree bitwise on every shared name.
    """

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._params: dict[str, Tensor] = {}

    def init_param(self, name: str, shape, init: str = "auto") -> Tensor:
        if name in self._params:
            raise ContractError(f"ParamStore: duplicate parameter name {name!r}")
        shape = tuple(int(n) for n in shape)
        t = Tensor(self._draw(name, shape, init), requires_grad=True)
        self._params[name] = t
        return t

    def ensure(self, name: str, shape, init: str = "auto") -> Tensor:
        shape = tuple(int(n) for n in shape)
        t = self._params.get(name)
        if t is None:
            return self.init_param(name, shape, init)
        if t.data.shape != shape:
            raise ShapeError(f"ParamStore: {name!r} exists with shape {t.data.shape}, "
                             f"requested {shape}")
        return t

    def _draw(self, name: str, shape, init: str) -> np.ndarray:
        if init == "ones":
            return np.ones(shape)
        if init == "zeros" or len(shape) <= 1:
            return np.zeros(shape)  # biases and other rank-1 params start at 0
        rng = np.random.default_rng([self.seed] + list(name.encode("utf-8")))
        fan_in = int(np.prod(shape[:-1]))
        fan_out = int(shape[-1])
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-bound, bound, shape)

    def alias(self, name: str, target: str) -> Tensor:
        """Register `name` as the same tensor as `target` (weight tying)."""
        if name in self._params:
            raise ContractError(f"ParamStore: duplicate parameter name {name!r}")
        self._params[name] = self._params[target]
        return self._params[name]

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self):
        return len(self._params)

    def names(self):
        return list(self._params.keys())

    def items(self):
        return self._params.items()

    def unique_tensors(self) -> dict[str, Tensor]:
        """Name -> tensor with aliases collapsed to their first name."""
        seen: dict[int, str] = {}
        out: dict[str, Tensor] = {}
        for name, t in self._params.items():
            if id(t) not in seen:
                seen[id(t)] = name
                out[name] = t
        return out

    def size(self) -> int:
        return sum(t.data.size for t in self.unique_tensors().values())

    def zero_grads(self):
        for t in self.unique_tensors().values():
            t.grad = None


class Linear:
    """y = x @ w + b over the last axis; x: [..., d_in] -> [..., d_out]."""

    def __init__(self, store: ParamStore, name: str, d_in: int, d_out: int, bias: bool = True):
        self.w = store.ensure(f"{name}.w", (d_in, d_out))
        self.b = store.ensure(f"{name}.b", (d_out,)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        squeeze = x.ndim == 1
        if squeeze:
            x = x.reshape((1, x.shape[0]))
        y = x @ self.w
        if self.b is not None:
            y = y + self.b
        return y.reshape((y.shape[-1],)) if squeeze else y


class LayerNorm:
    """Per-position normalization over the last axis with learned scale/shift."""

    EPS = 1e-6

    def __init__(self, store: ParamStore, name: str, d: int):
        self.gamma = store.ensure(f"{name}.scale", (d,), init="ones")
        self.beta = store.ensure(f"{name}.shift", (d,), init="zeros")

    def __call__(self, x: Tensor) -> Tensor:
        mu = x.mean(axis=-1, keepdims=True)
        centered = x - mu
        var = (centered * centered).mean(axis=-1, keepdims=True)
        normed = centered / ad.sqrt(var + self.EPS)
        return normed * self.gamma + self.beta


class FeedForward:
    """linear -> relu -> linear."""

    def __init__(self, store: ParamStore, name: str, d_in: int, d_hidden: int, d_out: int):
        self.inner = Linear(store, f"{name}.inner", d_in, d_hidden)
        self.outer = Linear(store, f"{name}.outer", d_hidden, d_out)

    def __call__(self, x: Tensor) -> Tensor:
        return self.outer(ad.relu(self.inner(x)))


def causal_mask(length: int) -> np.ndarray:
    """[Lq, Lk] lower-triangular boolean mask: True = may attend."""
    return np.tril(np.ones((length, length), dtype=bool))


class MultiHeadAttention:
    """Scaled dot-product attention with head splitting.

    q: [..., Lq, d_model], k/v: [..., Lk, d_model].
    key_mask: bool [..., Lk], False = padded key, never attended.
    causal: position j attends keys <= j (requires Lq == Lk).
    """

    def __init__(self, store: ParamStore, name: str, d_model: int, heads: int):
        if d_model % heads != 0:
            raise ContractError(f"attention: heads ({heads}) must divide d_model ({d_model})")
        self.heads = heads
        self.d_head = d_model // heads
        self.wq = Linear(store, f"{name}.q", d_model, d_model)
        self.wk = Linear(store, f"{name}.k", d_model, d_model)
        self.wv = Linear(store, f"{name}.v", d_model, d_model)
        self.wo = Linear(store, f"{name}.out", d_model, d_model)

    def _split(self, x: Tensor) -> Tensor:
        # [..., L, d_model] -> [..., heads, L, d_head]
        lead = x.shape[:-2]
        L = x.shape[-2]
        x = x.reshape(lead + (L, self.heads, self.d_head))
        n = len(lead)
        return x.transpose(tuple(range(n)) + (n + 1, n, n + 2))

    def _merge(self, x: Tensor) -> Tensor:
        lead = x.shape[:-3]
        L = x.shape[-2]
        n = len(lead)
        x = x.transpose(tuple(range(n)) + (n + 1, n, n + 2))
        return x.reshape(lead + (L, self.heads * self.d_head))

    def __call__(self, q, k, v, key_mask=None, causal: bool = False,
                 drop=None) -> Tensor:
        Lq, Lk = q.shape[-2], k.shape[-2]
        qh = self._split(self.wq(q))
        kh = self._split(self.wk(k))
        vh = self._split(self.wv(v))
        if key_mask is not None:
            # zero padded value rows so outputs are bitwise independent of
            # whatever token ids sat in the padding
            km = np.asarray(key_mask, dtype=bool)
            vh = ad.apply_mask(vh, km[..., None, :, None] if km.ndim > 1
                               else km[None, :, None])

        scores = (qh @ kh.transpose(tuple(range(qh.ndim - 2)) + (qh.ndim - 1, qh.ndim - 2))
                  ) * (1.0 / np.sqrt(self.d_head))

        mask = self._combined_mask(key_mask, causal, Lq, Lk, scores.shape)
        attn = ad.softmax(scores, axis=-1, mask=mask)
        if drop is not None:
            attn = drop(attn)
        return self.wo(self._merge(attn @ vh))

    def _combined_mask(self, key_mask, causal, Lq, Lk, score_shape):
        if key_mask is None and not causal:
            return None
        mask = np.ones(score_shape, dtype=bool)
        if key_mask is not None:
            km = np.asarray(key_mask, dtype=bool)
            km = km[..., None, None, :] if km.ndim > 1 else km[None, None, :]
            mask = mask & np.broadcast_to(km, score_shape)
        if causal:
            if Lq != Lk:
                raise ContractError(f"attention: causal requires Lq == Lk, got {Lq} vs {Lk}")
            mask = mask & causal_mask(Lq)
        return mask


class GRUCell:
    """Gated recurrent cell over equal-width input and state.

    out = z * state + (1 - z) * candidate, gates from [input; state].
    With all parameters zero this reduces to out = 0.5 * state.
    """

    def __init__(self, store: ParamStore, name: str, d: int):
        self.update = Linear(store, f"{name}.update", 2 * d, d)
        self.reset = Linear(store, f"{name}.reset", 2 * d, d)
        self.cand = Linear(store, f"{name}.cand", 2 * d, d)

    def __call__(self, x: Tensor, state: Tensor) -> Tensor:
        xs = ad.concat([x, state], axis=-1)
        z = ad.sigmoid(self.update(xs))
        r = ad.sigmoid(self.reset(xs))
        c = ad.tanh(self.cand(ad.concat([x, r * state], axis=-1)))
        return z * state + (1.0 - z) * c


class Dropout:
    """Inverted dropout; identity when rate is 0 or no rng is bound."""

    def __init__(self, rate: float, rng: np.random.Generator | None = None):
        if not 0.0 <= rate < 1.0:
            raise ContractError(f"dropout: rate must be in [0, 1), got {rate}")
        self.rate = rate
        self.rng = rng

    def __call__(self, x: Tensor) -> Tensor:
        if self.rate == 0.0 or self.rng is None:
            return x
        keep = self.rng.random(x.shape) >= self.rate
        return ad.apply_mask(x, keep) * (1.0 / (1.0 - self.rate))


def masked_mean(h: Tensor, mask, axis: int = -2) -> Tensor:
    """Mean over `axis` counting only unmasked entries.

    h: [..., L, d], mask: bool [..., L].  Bitwise independent of masked
    content.  A fully masked row has no mean and raises.
    """
    m = np.asarray(mask, dtype=bool)
    counts = m.sum(axis=-1)
    if not counts.all():
        raise ContractError("masked_mean: fully masked row")
    kept = ad.apply_mask(h, m[..., None])
    total = kept.sum(axis=axis)
    return total / Tensor(counts[..., None].astype(np.float64))
