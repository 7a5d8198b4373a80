"""Named parameter storage, Adam, and the binary checkpoint format.

Checkpoint layout (all integers little-endian)::

    magic      8 bytes   b"DKQACKPT"
    version    uint32    currently 1
    meta_len   uint32    length of the UTF-8 JSON metadata blob that follows
    meta       bytes     JSON object (model config, vocab sizes, free-form)
    adam_step  uint64    optimizer step counter
    n_params   uint32
    n_params times:
        name_len  uint16, name (UTF-8)
        ndim      uint8,  dims (uint32 each)
        has_state uint8   1 if Adam moments follow the values
        values    float64[prod(dims)]
        m, v      float64[prod(dims)] each, only when has_state == 1

Parameters are written in registration order.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from .autodiff import DTYPE, Tensor

MAGIC = b"DKQACKPT"
VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class ParameterStore:
    seed: int = 0
    init_scale: float = math.sqrt(3.0)
    params: dict[str, Tensor] = field(default_factory=dict)
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    def __post_init__(self):
        self.rng = np.random.default_rng(self.seed)

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def __iter__(self) -> Iterator[str]:
        return iter(self.params)

    def __len__(self) -> int:
        return len(self.params)

    def add(self, name: str, value) -> Tensor:
        if name in self.params:
            raise ValueError(f"parameter {name!r} registered twice")
        t = Tensor(np.array(value, dtype=DTYPE), name=name, requires_grad=True)
        self.params[name] = t
        return t

    def weight(
        self, name: str, shape: tuple[int, ...], fan_in: int | None = None, gain: float = 1.0
    ) -> Tensor:
        """Uniform in [-b, b] with b = gain * init_scale / sqrt(fan_in).

        ``fan_in`` defaults to shape[0]. The default init_scale = sqrt(3) gives
        variance gain^2 / fan_in.
        """
        fan = fan_in if fan_in is not None else shape[0]
        bound = gain * self.init_scale / math.sqrt(fan)
        return self.add(name, self.rng.uniform(-bound, bound, size=shape))

    def bias(self, name: str, size: int) -> Tensor:
        return self.add(name, np.zeros(size))

    def num_values(self) -> int:
        return sum(t.data.size for t in self.params.values())

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self.params.items()}

    def restore(self, values: dict[str, np.ndarray]) -> None:
        for k, arr in values.items():
            self.params[k].data = arr.copy()


def adam_step(
    store: ParameterStore,
    grads: dict[str, np.ndarray],
    lr: float = 7e-4,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
) -> None:
    """One in-place Adam update. A parameter absent from ``grads`` sees a zero gradient."""
    b1, b2 = betas
    store.step += 1
    t = store.step
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for name, p in store.params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        elif g.shape != p.data.shape:
            raise ValueError(f"gradient for {name!r} has shape {g.shape}, parameter {p.data.shape}")
        m = store.m.get(name)
        if m is None:
            m = store.m[name] = np.zeros_like(p.data)
            store.v[name] = np.zeros_like(p.data)
        v = store.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + eps)


def save_checkpoint(path: str | Path, store: ParameterStore, meta: dict | None = None) -> None:
    blob = json.dumps(meta or {}, sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<II", VERSION, len(blob)), blob]
    parts.append(struct.pack("<QI", store.step, len(store.params)))
    for name, t in store.params.items():
        raw = name.encode("utf-8")
        arr = t.data
        has_state = name in store.m
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(struct.pack("<B", int(has_state)))
        parts.append(arr.astype("<f8").tobytes())
        if has_state:
            parts.append(store.m[name].astype("<f8").tobytes())
            parts.append(store.v[name].astype("<f8").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path: str | Path) -> tuple[ParameterStore, dict]:
    buf = Path(path).read_bytes()
    if buf[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    pos = 8

    def take(fmt: str):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(buf):
            raise CheckpointError(f"{path}: truncated")
        vals = struct.unpack_from(fmt, buf, pos)
        pos += size
        return vals

    def take_array(shape):
        nonlocal pos
        n = int(np.prod(shape, dtype=np.int64)) * 8
        if pos + n > len(buf):
            raise CheckpointError(f"{path}: truncated")
        arr = np.frombuffer(buf, dtype="<f8", count=n // 8, offset=pos).astype(DTYPE).reshape(shape)
        pos += n
        return arr

    version, meta_len = take("<II")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    meta = json.loads(buf[pos : pos + meta_len].decode("utf-8"))
    pos += meta_len
    step, count = take("<QI")
    store = ParameterStore(seed=int(meta.get("seed", 0)))
    store.step = step
    for _ in range(count):
        (name_len,) = take("<H")
        name = buf[pos : pos + name_len].decode("utf-8")
        pos += name_len
        (ndim,) = take("<B")
        shape = take(f"<{ndim}I") if ndim else ()
        (has_state,) = take("<B")
        store.add(name, take_array(shape))
        if has_state:
            store.m[name] = take_array(shape)
            store.v[name] = take_array(shape)
    if pos != len(buf):
        raise CheckpointError(f"{path}: {len(buf) - pos} trailing bytes")
    return store, meta
