"""Transformer encoder-decoder with a routed global sentence state.

A float64 tape-autodiff stack, the model itself (capsule routing over all
encoder layers, recurrent layer aggregation, gated decoder fusion), and a
training/decoding/probing harness for synthetic sequence tasks.
"""

from .config import ModelConfig, ConfigError, BOS, EOS, PAD, UNK
from .decoding import beam_decode
from .metrics import bleu, exact_match
from .model import Model, param_count
from .probe import probe_train_eval
from .tasks import TaskSpec, corpus, make_batch
from .training import train

__version__ = "0.1.0"

__all__ = [
    "BOS", "EOS", "PAD", "UNK",
    "ConfigError", "Model", "ModelConfig", "TaskSpec",
    "beam_decode", "bleu", "corpus", "exact_match", "make_batch",
    "param_count", "probe_train_eval", "train", "__version__",
]
