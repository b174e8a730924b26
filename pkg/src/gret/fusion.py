"""Fusing the global state into the decoder output.

Gate on: an elementwise sigmoid gate, computed from each decoder state
concatenated with the global state, decides per coordinate how much of the
global state that position absorbs.  Gate off but a global state in play:
plain addition.  No global state: states pass through untouched.
Fusion happens once, on the last decoder layer, right before the output
projection, at training time and at every decode step alike.
"""

from __future__ import annotations

from dataclasses import dataclass

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .nn import Linear, ParamStore


@dataclass
class GateOutput:
    gate: Tensor  # g [..., J, d_model], every entry strictly in (0, 1)
    fused: Tensor  # r + g * s


class ContextGate:
    def __init__(self, store: ParamStore, name: str, d_model: int):
        self.d_model = d_model
        self.affine = Linear(store, name, 2 * d_model, d_model)

    def __call__(self, states: Tensor, s: Tensor) -> GateOutput:
        """states: [..., J, d_model]; s: [..., d_model], broadcast over J."""
        if states.shape[-1] != self.d_model or s.shape[-1] != self.d_model:
            raise ShapeError(f"context_gate: width mismatch, states {states.shape}, "
                             f"s {s.shape}, expected last dim {self.d_model}")
        s_rows = _per_position(s, states.shape)
        g = ad.sigmoid(self.affine(ad.concat([states, s_rows], axis=-1)))
        return GateOutput(gate=g, fused=states + g * s_rows)


def _per_position(s: Tensor, states_shape) -> Tensor:
    # [..., d] -> [..., J, d] by broadcast over the position axis
    s = s.reshape(s.shape[:-1] + (1,) + s.shape[-1:])
    return ad.broadcast_to(s, states_shape)


def fuse_states(states: Tensor, s: Tensor | None, gate: ContextGate | None):
    """Returns (states ready for the output projection, GateOutput | None)."""
    if s is None:
        return states, None
    if gate is not None:
        out = gate(states, s)
        return out.fused, out
    return states + _per_position(s, states.shape), None
