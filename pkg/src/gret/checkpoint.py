"""Binary checkpoint container.

Layout, all little-endian:

    magic "GRET" | format version u32 | config fingerprint (32 bytes) |
    param count u64 | param records... |
    section magic "ADAM" | record count u64 | moment records...

One record: name length u32, name bytes (utf-8), rank u32, one u64 per
dim, then the float64 payload.  Optimizer moments are stored as records
named "m.<param>" / "v.<param>", plus a rank-0 "step" record holding the
step counter.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .autodiff import ContractError

MAGIC = b"GRET"
ADAM_MAGIC = b"ADAM"
VERSION = 1


@dataclass
class Checkpoint:
    fingerprint: bytes
    params: dict  # name -> float64 ndarray
    moments: dict = field(default_factory=dict)  # name -> (m, v)
    step: int = 0


def _pack_record(name: str, arr: np.ndarray) -> bytes:
    nb = name.encode("utf-8")
    head = struct.pack("<I", len(nb)) + nb + struct.pack("<I", arr.ndim)
    head += b"".join(struct.pack("<Q", d) for d in arr.shape)
    return head + np.ascontiguousarray(arr, dtype="<f8").tobytes()


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.at = 0

    def take(self, n: int) -> bytes:
        if self.at + n > len(self.blob):
            raise ContractError("checkpoint: truncated file")
        out = self.blob[self.at:self.at + n]
        self.at += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]

    def record(self):
        name = self.take(self.u32()).decode("utf-8")
        rank = self.u32()
        shape = tuple(self.u64() for _ in range(rank))
        count = int(np.prod(shape)) if shape else 1
        data = np.frombuffer(self.take(8 * count), dtype="<f8").reshape(shape)
        return name, data.astype(np.float64)


def save(path, model, optimizer=None):
    """Write parameters (aliases collapsed) and optimizer state."""
    params = model.store.unique_tensors()
    out = [struct.pack("<4sI", MAGIC, VERSION),
           model.cfg.arch_fingerprint(),
           struct.pack("<Q", len(params))]
    for name, t in params.items():
        out.append(_pack_record(name, t.data))

    moment_records = []
    if optimizer is not None:
        for name in params:
            mv = optimizer.moments.get(name)
            if mv is not None:
                moment_records.append(("m." + name, mv[0]))
                moment_records.append(("v." + name, mv[1]))
        moment_records.append(("step", np.float64(optimizer.step_count)))
    out.append(struct.pack("<4sQ", ADAM_MAGIC, len(moment_records)))
    for name, arr in moment_records:
        out.append(_pack_record(name, np.asarray(arr)))

    with open(path, "wb") as fh:
        fh.write(b"".join(out))


def load(path) -> Checkpoint:
    with open(path, "rb") as fh:
        r = _Reader(fh.read())
    magic, version = struct.unpack("<4sI", r.take(8))
    if magic != MAGIC:
        raise ContractError(f"checkpoint: bad magic {magic!r}")
    if version != VERSION:
        raise ContractError(f"checkpoint: unsupported format version {version}")
    fingerprint = r.take(32)
    params = dict(r.record() for _ in range(r.u64()))

    moments: dict = {}
    step = 0
    adam_magic = r.take(4)
    if adam_magic != ADAM_MAGIC:
        raise ContractError(f"checkpoint: bad section magic {adam_magic!r}")
    raw = dict(r.record() for _ in range(r.u64()))
    for name, arr in raw.items():
        if name == "step":
            step = int(arr.reshape(()))
        elif name[:2] in ("m.", "v."):
            slot = moments.setdefault(name[2:], [None, None])
            slot[0 if name[0] == "m" else 1] = arr
    return Checkpoint(fingerprint=fingerprint, params=params, moments=moments, step=step)


def load_into(path, model, optimizer=None):
    """Restore a checkpoint into a built model (and optimizer, if given).

    The architecture fingerprint must match.  Parameters the checkpoint
    lacks keep their fresh initialization (capsule machinery warm-started
    from a baseline); parameters the model lacks are an error.
    """
    ckpt = load(path)
    if ckpt.fingerprint != model.cfg.arch_fingerprint():
        raise ContractError("checkpoint: architecture fingerprint mismatch")
    store = model.store
    known = store.unique_tensors()
    unknown = [n for n in ckpt.params if n not in known]
    if unknown:
        raise ContractError(f"checkpoint: parameters unknown to this config: {unknown[:3]}")
    for name, arr in ckpt.params.items():
        target = known[name]
        if target.data.shape != arr.shape:
            raise ContractError(f"checkpoint: shape mismatch for {name}: "
                                f"{arr.shape} vs {target.data.shape}")
        target.data = arr.copy()
    if optimizer is not None:
        optimizer.step_count = ckpt.step
        for name, (m, v) in ckpt.moments.items():
            if name in known and m is not None and v is not None:
                optimizer.moments[name] = [m.copy(), v.copy()]
    return ckpt
