"""Global sentence state from per-layer encoder outputs.

Pipeline per layer: project positions into K capsule views, route them into
K capsules (agreement-driven soft assignment, unrolled and differentiable),
reduce the capsules to one vector by attentive pooling.  A GRU then folds
the per-layer vectors into one state; without the aggregate flag only the
top layer feeds through.

Position-axis reductions inside routing use sorted_sum so the result is
bitwise invariant to consistent permutations of the input positions.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, Tensor
from .config import ModelConfig
from .nn import FeedForward, GRUCell, ParamStore, masked_mean
from .transformer import EncoderOutput

ZERO_NORM_FLOOR = 1e-12


@dataclass
class RoutingState:
    logits: Tensor  # B [..., K, I] after the last applied update
    capsules: Tensor  # U [..., K, d_cap]
    coupling: Tensor  # c [..., K, I] from the final iteration
    iteration: int


@dataclass
class GlobalState:
    per_layer: list  # s^1..s^M (or a single entry when not aggregating)
    routing: list  # RoutingState per processed layer; empty without capsules

    @property
    def final(self) -> Tensor:
        return self.per_layer[-1]


def squash(t: Tensor, axis: int = -1) -> Tensor:
    """Scale vectors along `axis` into the open unit ball, keeping direction.

    Zero vectors (norm below 1e-12) map to exact zeros; the factor is
    masked to 0 there, which also matches the true derivative limit.
    """
    n2 = (t * t).sum(axis=axis, keepdims=True)
    norm = ad.sqrt(n2)
    factor = n2 / (1.0 + n2) / ad.maximum(norm, ZERO_NORM_FLOOR)
    factor = ad.apply_mask(factor, norm.data >= ZERO_NORM_FLOOR)
    return t * factor


def transform_inputs(h: Tensor, weights: list) -> Tensor:
    """Per-capsule views of the positions: [..., I, d] -> [..., K, I, d_cap].

    weights: K projection matrices (d_model, d_cap), one per capsule.
    """
    views = []
    lead = h.shape[:-2]
    for w in weights:
        v = h @ w  # [..., I, d_cap]
        views.append(v.reshape(lead + (1,) + v.shape[-2:]))
    return ad.concat(views, axis=-3)


def _routing_softmax(b: Tensor, mask: np.ndarray) -> Tensor:
    """Softmax of each capsule's logits over unmasked positions, with a
    permutation-canonical denominator.  Masked entries are exactly 0."""
    shift = np.max(np.where(mask, b.data, -np.inf), axis=-1, keepdims=True)
    z = ad.apply_mask(ad.exp(b - shift), mask)
    return z / ad.sorted_sum(z, axis=-1, keepdims=True)


def dynamic_routing(hhat: Tensor, pad_mask, iters: int):
    """Agreement routing of position views into capsules.

    hhat: [..., K, I, d_cap]; pad_mask: bool [..., I]; iters >= 1.
    Returns (U, RoutingState) with U: [..., K, d_cap].  The final
    iteration's logit update is skipped: it has no consumer.
    """
    if iters < 1:
        raise ContractError(f"dynamic_routing: iters must be >= 1, got {iters}")
    mask = np.asarray(pad_mask, dtype=bool)
    if not mask.any(axis=-1).all():
        raise ContractError("dynamic_routing: all positions masked")

    k = hhat.shape[-3]
    bmask = np.broadcast_to(mask[..., None, :], hhat.shape[:-3] + (k, mask.shape[-1]))
    hhat = ad.apply_mask(hhat, bmask[..., None])

    b = Tensor(np.zeros(bmask.shape))
    u = coupling = None
    for it in range(iters):
        coupling = _routing_softmax(b, bmask)  # [..., K, I]
        weighted = hhat * coupling.reshape(coupling.shape + (1,))
        u = squash(ad.sorted_sum(weighted, axis=-2))  # [..., K, d_cap]
        if it + 1 < iters:
            agreement = (hhat * u.reshape(u.shape[:-1] + (1,) + u.shape[-1:])).sum(axis=-1)
            b = b + agreement

    return u, RoutingState(logits=b, capsules=u, coupling=coupling, iteration=iters)


class AttentivePool:
    """Reduce K capsules to one d_model vector with a learned query.

    The query lives in capsule space (it dots with the capsules); only the
    output head changes width to d_model.
    """

    def __init__(self, store: ParamStore, name: str, d_cap: int, d_hidden: int, d_model: int):
        self.query = FeedForward(store, f"{name}.query", d_cap, d_hidden, d_cap)
        self.out = FeedForward(store, f"{name}.out", d_cap, d_hidden, d_model)

    def __call__(self, capsules: Tensor) -> Tensor:
        q = self.query(capsules.mean(axis=-2))  # [..., d_cap]
        scores = (capsules * q.reshape(q.shape[:-1] + (1,) + q.shape[-1:])).sum(axis=-1)
        a = ad.softmax(scores, axis=-1)  # [..., K]
        pooled = (capsules * a.reshape(a.shape + (1,))).sum(axis=-2)
        return self.out(pooled)


class GlobalStateBuilder:
    """Owns the capsule/pooling/GRU parameters dictated by the flags and
    turns an EncoderOutput into a GlobalState (or None if no flag needs it).

    Capsule projections are per layer; pooling and the GRU are shared
    across layers.  Without the capsule flag the per-layer vector is the
    masked mean of that layer's states.
    """

    def __init__(self, store: ParamStore, cfg: ModelConfig):
        self.cfg = cfg
        self.enabled = cfg.capsule or cfg.aggregate or cfg.gate
        self.capsule_weights: dict[int, list] = {}
        self.pool = None
        self.gru = None
        if not self.enabled:
            return
        if cfg.capsule:
            layers = range(cfg.enc_layers) if cfg.aggregate else [cfg.enc_layers - 1]
            for m in layers:
                self.capsule_weights[m] = [
                    store.ensure(f"cap.l{m}.w{k}", (cfg.d_model, cfg.cap_width))
                    for k in range(cfg.capsules)]
            self.pool = AttentivePool(store, "pool", cfg.cap_width, cfg.ffn_hidden, cfg.d_model)
        if cfg.aggregate:
            self.gru = GRUCell(store, "agg.gru", cfg.d_model)

    def layer_vector(self, enc: EncoderOutput, m: int):
        """Pooled d_model vector for encoder layer m (0-based)."""
        h = enc.layers[m]
        if self.cfg.capsule:
            hhat = transform_inputs(h, self.capsule_weights[m])
            u, routing = dynamic_routing(hhat, enc.pad_mask, self.cfg.routing_iters)
            return self.pool(u), routing
        return masked_mean(h, enc.pad_mask), None

    def __call__(self, enc: EncoderOutput) -> GlobalState | None:
        if not self.enabled:
            return None
        if self.cfg.aggregate:
            lead = enc.final.shape[:-2]
            state = Tensor(np.zeros(lead + (self.cfg.d_model,)))
            per_layer, routings = [], []
            for m in range(enc.depth):
                vec, routing = self.layer_vector(enc, m)
                state = self.gru(vec, state)
                per_layer.append(state)
                if routing is not None:
                    routings.append(routing)
            return GlobalState(per_layer=per_layer, routing=routings)
        vec, routing = self.layer_vector(enc, enc.depth - 1)
        return GlobalState(per_layer=[vec], routing=[routing] if routing else [])
