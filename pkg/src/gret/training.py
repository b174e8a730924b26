"""Loss, optimizer, schedule, and the training loop."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import checkpoint as ckpt_io
from .autodiff import ContractError, Tensor, backward, record
from .config import PAD, ModelConfig
from .model import Model
from .nn import Dropout, ParamStore
from .tasks import TaskSpec, corpus, make_batch


def smoothed_loss(logits: Tensor, targets, pad_mask, smoothing: float, vocab: int) -> Tensor:
    """Mean over non-pad positions of the (smoothed) negative log-likelihood.

    logits: [..., J, V]; targets: int [..., J]; pad_mask: bool [..., J].
    Smoothing mass spreads uniformly over the non-pad vocabulary.  Batched
    input averages per-sentence means, matching the per-sentence 1/J
    normalization of the objective.
    """
    if not 0.0 <= smoothing <= 0.3:
        raise ContractError(f"loss: smoothing must be in [0, 0.3], got {smoothing}")
    targets = np.asarray(targets)
    mask = np.asarray(pad_mask, dtype=bool)
    counts = mask.sum(axis=-1)
    if not counts.all():
        raise ContractError("loss: all-pad target sequence")

    # log-softmax, numerically anchored by a constant shift
    shift = logits.data.max(axis=-1, keepdims=True)
    z = logits - shift
    logp = z - ad.log(ad.exp(z).sum(axis=-1, keepdims=True))

    q = np.zeros(logits.shape)
    np.put_along_axis(q, targets[..., None], 1.0 - smoothing, axis=-1)
    if smoothing > 0.0:
        allowed = np.ones(vocab, dtype=bool)
        allowed[PAD] = False
        q[..., allowed] += smoothing / allowed.sum()
    nll = -(logp * Tensor(q)).sum(axis=-1)  # [..., J]
    nll = ad.apply_mask(nll, mask)
    per_seq = nll.sum(axis=-1) / Tensor(counts.astype(np.float64))
    return per_seq.mean()


def lr_at(step: int, d_model: int, warmup: int) -> float:
    """Inverse-sqrt schedule with linear warmup; continuous at the corner."""
    if step < 1:
        raise ContractError(f"lr_at: step must be >= 1, got {step}")
    return d_model ** -0.5 * min(step ** -0.5, step * warmup ** -1.5)


class Adam:
    """Adam with bias correction and the warmup learning-rate schedule."""

    BETA1, BETA2, EPS = 0.9, 0.98, 1e-9

    def __init__(self, d_model: int, warmup: int):
        self.d_model = d_model
        self.warmup = warmup
        self.step_count = 0
        self.moments: dict[str, list] = {}  # name -> [m, v]

    def step(self, store: ParamStore):
        self.step_count += 1
        lr = lr_at(self.step_count, self.d_model, self.warmup)
        b1, b2 = self.BETA1, self.BETA2
        bc1 = 1.0 - b1 ** self.step_count
        bc2 = 1.0 - b2 ** self.step_count
        for name, p in store.unique_tensors().items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            mv = self.moments.get(name)
            if mv is None:
                mv = self.moments[name] = [np.zeros_like(p.data), np.zeros_like(p.data)]
            mv[0] = b1 * mv[0] + (1.0 - b1) * g
            mv[1] = b2 * mv[1] + (1.0 - b2) * (g * g)
            p.data -= lr * (mv[0] / bc1) / (np.sqrt(mv[1] / bc2) + self.EPS)


@dataclass
class TrainResult:
    model: Model
    optimizer: Adam
    losses: list = field(default_factory=list)
    wall_seconds: float = 0.0


def train(cfg: ModelConfig, task: TaskSpec, steps: int, batch_size: int = 16,
          init_path: str | None = None, checkpoint_path: str | None = None,
          checkpoint_every: int = 0, log=None) -> TrainResult:
    """Deterministic training run; same cfg/task/steps give identical curves.

    init_path warm-starts parameters, moments, and the step counter from a
    checkpoint with a matching architecture fingerprint; parameters the
    checkpoint lacks (capsule machinery over a baseline) stay freshly
    initialized.
    """
    model = Model(cfg)
    opt = Adam(cfg.d_model, cfg.warmup_steps)
    if init_path is not None:
        ckpt_io.load_into(init_path, model, opt)

    data = corpus(task, "train")
    batch_rng = np.random.default_rng([cfg.seed, 11])
    drop_rng = np.random.default_rng([cfg.seed, 13])
    drop = Dropout(cfg.dropout, drop_rng if cfg.dropout > 0 else None)

    result = TrainResult(model=model, optimizer=opt)
    start = time.perf_counter()
    for _ in range(steps):
        idx = batch_rng.integers(0, len(data), size=batch_size)
        batch = make_batch([data[i] for i in idx])
        model.store.zero_grads()
        with record():
            out = model.forward(batch, drop)
            loss = smoothed_loss(out.logits, batch.tgt_out, batch.tgt_mask,
                                 cfg.label_smoothing, cfg.vocab)
            backward(loss)
        opt.step(model.store)
        result.losses.append(loss.item())
        if log is not None:
            log(opt.step_count, result.losses[-1])
        if checkpoint_path and checkpoint_every and opt.step_count % checkpoint_every == 0:
            ckpt_io.save(checkpoint_path, model, opt)
    result.wall_seconds = time.perf_counter() - start
    if checkpoint_path:
        ckpt_io.save(checkpoint_path, model, opt)
    return result
