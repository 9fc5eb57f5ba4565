"""Named parameter storage and the binary checkpoint format.

A checkpoint is a two-line text head (magic + JSON manifest) followed by one
binary blob. The manifest lists name, shape, dtype and byte offset for every
entry in lexicographic name order; the blob holds the little-endian float64
values row-major in that same order. Round-trips are bit-exact.
"""

from __future__ import annotations

import json

import numpy as np

from .autodiff import DTYPE, Tensor

CHECKPOINT_MAGIC = "densecap-seq-checkpoint"
CHECKPOINT_VERSION = 1


class ParamStore:
    """Map of unique names to gradient-carrying tensors.

    Iteration order is lexicographic so that optimizer sweeps and
    checkpoints are deterministic.
    """

    def __init__(self):
        self._entries: dict[str, Tensor] = {}

    def add(self, name: str, value) -> Tensor:
        if name in self._entries:
            raise ValueError(f"duplicate parameter name: {name}")
        t = Tensor(np.asarray(value, dtype=DTYPE), requires_grad=True)
        self._entries[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._entries[name]

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    def names(self) -> list[str]:
        return sorted(self._entries)

    def items(self):
        for name in self.names():
            yield name, self._entries[name]

    def zero_grad(self):
        for t in self._entries.values():
            t.grad = None

    def num_values(self) -> int:
        return sum(t.data.size for t in self._entries.values())

    def clone_data(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self.items()}


def uniform_init(store: ParamStore, name: str, shape, rng: np.random.Generator,
                 scale: float = 0.08) -> Tensor:
    """Classic small-RNN recipe: every parameter uniform in [-scale, scale]."""
    return store.add(name, rng.uniform(-scale, scale, size=shape))


def clip_grad_norm(store: ParamStore, max_norm: float) -> float:
    """Scale all gradients so their global L2 norm is at most max_norm."""
    total = 0.0
    for _, t in store.items():
        if t.grad is not None:
            total += float((t.grad * t.grad).sum())
    norm = total ** 0.5
    if norm > max_norm and norm > 0.0:
        factor = max_norm / norm
        for _, t in store.items():
            if t.grad is not None:
                t.grad *= factor
    return norm


def save_checkpoint(store: ParamStore, path):
    entries = []
    offset = 0
    blobs = []
    for name, t in store.items():
        raw = np.ascontiguousarray(t.data, dtype="<f8").tobytes()
        entries.append(
            {"name": name, "shape": list(t.data.shape), "dtype": "<f8", "offset": offset}
        )
        blobs.append(raw)
        offset += len(raw)
    manifest = {
        "magic": CHECKPOINT_MAGIC,
        "version": CHECKPOINT_VERSION,
        "entries": entries,
        "total_bytes": offset,
    }
    with open(path, "wb") as f:
        f.write(f"{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}\n".encode())
        f.write(json.dumps(manifest, sort_keys=True).encode())
        f.write(b"\n")
        for raw in blobs:
            f.write(raw)


def load_checkpoint(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as f:
        head = f.readline().decode().strip().split()
        if len(head) != 2 or head[0] != CHECKPOINT_MAGIC:
            raise ValueError(f"not a checkpoint file: {path}")
        if int(head[1]) != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {head[1]}")
        manifest = json.loads(f.readline().decode())
        blob = f.read()
    if len(blob) != manifest["total_bytes"]:
        raise ValueError(
            f"truncated checkpoint: expected {manifest['total_bytes']} bytes, "
            f"got {len(blob)}"
        )
    out = {}
    for entry in manifest["entries"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        arr = np.frombuffer(blob, dtype=entry["dtype"], count=count, offset=start)
        out[entry["name"]] = arr.reshape(shape).astype(DTYPE)
    return out


def store_from_checkpoint(path) -> ParamStore:
    store = ParamStore()
    for name, arr in sorted(load_checkpoint(path).items()):
        store.add(name, arr)
    return store
