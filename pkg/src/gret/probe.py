"""Word-content probing of frozen sentence representations.

A small classifier is trained to recover the bag of payload tokens in the
target sentence from one frozen vector per source sentence.  Three pooling
strategies produce that vector from the same trained model:

  gret     the model's global sentence state (requires the flags on)
  average  masked mean of the final encoder layer
  last     final-layer state at the last real position (the EOS slot)

The probe is a one-hidden-layer MLP trained with elementwise sigmoid
cross-entropy; quality is precision of the top-K predicted tokens against
the true bag on the held-out split, for each requested K.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, Tensor, backward, no_grad, record
from .config import NUM_SPECIALS
from .model import Model
from .nn import FeedForward, ParamStore, masked_mean
from .tasks import TaskSpec, corpus, make_batch
from .training import Adam

POOLINGS = ("gret", "average", "last")
DEFAULT_TOPK = (5, 10, 20)


def representations(model: Model, pairs: list, pooling: str,
                    chunk: int = 1024) -> np.ndarray:
    """One frozen vector per pair; [N, d_model] float64.

    Encoded in chunks of `chunk` sentences: routing materializes
    [N, K, I, d_cap] intermediates, so a single pass over a large corpus
    of long sentences would exhaust memory.  Per-sentence results do not
    depend on the chunking (nothing reduces across sentences).
    """
    if pooling not in POOLINGS:
        raise ContractError(f"probe: unknown pooling {pooling!r}, expected {POOLINGS}")
    if chunk < 1:
        raise ContractError(f"probe: chunk must be >= 1, got {chunk}")
    out = []
    for lo in range(0, len(pairs), chunk):
        batch = make_batch(pairs[lo:lo + chunk])
        with no_grad():
            enc = model.encode(batch.src, batch.src_mask)
            if pooling == "gret":
                if enc.global_state is None:
                    raise ContractError("probe: pooling 'gret' needs a model with a "
                                        "global state (capsule/aggregate/gate flags)")
                out.append(enc.global_state.data.copy())
            elif pooling == "average":
                out.append(masked_mean(enc.final, batch.src_mask).data.copy())
            else:
                last = batch.src_mask.sum(axis=-1) - 1
                out.append(enc.final.data[np.arange(len(batch.src)), last].copy())
    return np.concatenate(out, axis=0)


def bag_matrix(pairs: list, vocab: int) -> np.ndarray:
    """Multi-hot [N, vocab - NUM_SPECIALS] of payload tokens in each target."""
    y = np.zeros((len(pairs), vocab - NUM_SPECIALS))
    for i, (_, tgt) in enumerate(pairs):
        y[i, np.unique(np.asarray(tgt)) - NUM_SPECIALS] = 1.0
    return y


def bce_with_logits(logits: Tensor, y: np.ndarray) -> Tensor:
    """Elementwise sigmoid cross-entropy, mean over all entries.

    Computed as max(z, 0) - z*y + log(1 + exp(-|z|)), stable for any z.
    """
    z = logits
    abs_z = ad.maximum(z, -z)
    return (ad.relu(z) - z * Tensor(y) + ad.log(1.0 + ad.exp(-abs_z))).mean()


def precision_at_k(scores: np.ndarray, bags: np.ndarray, k: int) -> float:
    """Mean over rows of |top-k by score ∩ bag| / min(k, |bag|)."""
    if scores.shape != bags.shape:
        raise ContractError(f"probe: scores {scores.shape} vs bags {bags.shape}")
    order = np.argsort(-scores, axis=-1, kind="stable")[:, :k]
    hits = np.take_along_axis(bags, order, axis=-1).sum(axis=-1)
    sizes = np.minimum(bags.sum(axis=-1), k)
    if not sizes.all():
        raise ContractError("probe: empty token bag")
    return float((hits / sizes).mean())


def probe_train_eval(model: Model, task: TaskSpec, topk=DEFAULT_TOPK,
                     pooling: str = "gret", seed: int = 0, steps: int = 300,
                     hidden: int = 64, batch_size: int = 64) -> dict[int, float]:
    """Train a probe on the train split, return {K: precision@K} on test.

    The model is frozen throughout; only the probe's own parameters move.
    """
    train_pairs = corpus(task, "train")
    test_pairs = corpus(task, "test")
    x_train = representations(model, train_pairs, pooling)
    x_test = representations(model, test_pairs, pooling)
    y_train = bag_matrix(train_pairs, task.vocab)
    y_test = bag_matrix(test_pairs, task.vocab)

    d = x_train.shape[-1]
    store = ParamStore(seed)
    mlp = FeedForward(store, "probe", d, hidden, y_train.shape[-1])
    opt = Adam(d_model=d, warmup=50)
    rng = np.random.default_rng([seed, 23])

    for _ in range(steps):
        idx = rng.integers(0, len(x_train), size=batch_size)
        store.zero_grads()
        with record():
            loss = bce_with_logits(mlp(Tensor(x_train[idx])), y_train[idx])
            backward(loss)
        opt.step(store)

    with no_grad():
        scores = mlp(Tensor(x_test)).data
    return {int(k): precision_at_k(scores, y_test, int(k)) for k in topk}
