"""Seeded randomness, stop-gradient, parameter stores and the checkpoint container.

Autodiff is provided by PyTorch; everything here is a thin deterministic layer
on top of it.
"""
from __future__ import annotations

import base64
import hashlib
import json
import os
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, Mapping, Optional, Sequence, Tuple

import numpy as np
import torch
from torch import nn

from .errors import CorruptCheckpoint, InvalidArgument, UnsupportedSchema

MAGIC = b"JGSEGCKP"
SCHEMA_VERSION = 1

GROUPS = ("G.shared", "G.tImage", "G.tSeg", "G.mapping", "D_r", "D_m", "E")
# non-learnable arrays (buffers, EMA copies, optimizer moments) travel under this tag
AUX = "aux"


class SeededRng:
    """A named, serializable random stream.

    Streams with the same ``seed`` but different ``stream_id`` are seeded from
    distinct SeedSequence spawn keys and are therefore independent.
    """

    def __init__(self, seed: int, stream_id: str):
        if seed < 0 or seed >= 2**64:
            raise InvalidArgument(f"seed must be a 64-bit unsigned integer, got {seed}")
        self.seed = int(seed)
        self.stream_id = stream_id
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=(zlib.crc32(stream_id.encode()),))
        torch_seed = int(ss.generate_state(1, np.uint64)[0]) >> 1
        self.generator = torch.Generator().manual_seed(torch_seed)

    def get_state(self) -> dict:
        raw = self.generator.get_state().numpy().tobytes()
        return {"seed": self.seed, "stream_id": self.stream_id, "state": base64.b64encode(raw).decode()}

    def set_state(self, state: Mapping) -> None:
        raw = base64.b64decode(state["state"])
        self.generator.set_state(torch.from_numpy(np.frombuffer(raw, dtype=np.uint8).copy()))

    @classmethod
    def from_state(cls, state: Mapping) -> "SeededRng":
        rng = cls(int(state["seed"]), state["stream_id"])
        rng.set_state(state)
        return rng

    def randint(self, high: int, size: int) -> torch.Tensor:
        return torch.randint(high, (size,), generator=self.generator)

    def __repr__(self):
        return f"SeededRng(seed={self.seed}, stream_id={self.stream_id!r})"


def normal_sample(rng: SeededRng, shape: Sequence[int], dtype=torch.float32) -> torch.Tensor:
    """I.i.d. standard-normal draws from ``rng``."""
    shape = tuple(int(s) for s in shape)
    if len(shape) == 0 or any(s <= 0 for s in shape):
        raise InvalidArgument(f"shape must have positive dimensions, got {shape}")
    return torch.randn(shape, generator=rng.generator, dtype=dtype)


def stop_gradient(value: torch.Tensor) -> torch.Tensor:
    """Identity forward, zero derivative backward."""
    return value.detach()


@dataclass
class ParameterStore:
    """Named float32 arrays, each with exactly one group tag."""

    arrays: Dict[str, np.ndarray] = field(default_factory=dict)
    groups: Dict[str, str] = field(default_factory=dict)

    def add(self, name: str, array, group: str) -> None:
        if name in self.arrays:
            raise InvalidArgument(f"duplicate parameter name {name!r}")
        if group not in GROUPS and group != AUX:
            raise InvalidArgument(f"unknown group tag {group!r}")
        if isinstance(array, torch.Tensor):
            array = array.detach().cpu().numpy()
        self.arrays[name] = np.ascontiguousarray(array, dtype=np.float32).copy()
        self.groups[name] = group

    def names_in(self, group: str) -> list:
        return [n for n, g in self.groups.items() if g == group]

    def subset(self, prefix: str) -> Dict[str, np.ndarray]:
        return {n[len(prefix):]: a for n, a in self.arrays.items() if n.startswith(prefix)}

    def digest(self, groups: Optional[Iterable[str]] = None) -> str:
        """SHA-256 over names and bytes, optionally restricted to some groups."""
        wanted = set(groups) if groups is not None else None
        h = hashlib.sha256()
        for name in sorted(self.arrays):
            if wanted is not None and self.groups[name] not in wanted:
                continue
            h.update(name.encode())
            h.update(self.arrays[name].tobytes())
        return h.hexdigest()

    def __eq__(self, other):
        if not isinstance(other, ParameterStore):
            return NotImplemented
        if self.groups != other.groups:
            return False
        return all(
            self.arrays[n].shape == other.arrays[n].shape
            and self.arrays[n].tobytes() == other.arrays[n].tobytes()
            for n in self.arrays
        )

    def __len__(self):
        return len(self.arrays)


def add_module(store: ParameterStore, prefix: str, module: nn.Module, group_of=None) -> None:
    """Register every parameter and buffer of ``module`` under ``prefix``.

    ``group_of(name)`` returns the group tag for a parameter name; buffers
    are always tagged :data:`AUX`.
    """
    for name, p in module.named_parameters():
        group = group_of(name) if callable(group_of) else group_of
        store.add(f"{prefix}.{name}", p, group)
    for name, b in module.named_buffers():
        store.add(f"{prefix}.{name}", b.float(), AUX)


@torch.no_grad()
def load_module(store: ParameterStore, prefix: str, module: nn.Module) -> None:
    tensors = dict(module.named_parameters())
    tensors.update(dict(module.named_buffers()))
    for name, t in tensors.items():
        key = f"{prefix}.{name}"
        if key not in store.arrays:
            raise CorruptCheckpoint(f"checkpoint lacks array {key!r}")
        arr = store.arrays[key]
        if tuple(arr.shape) != tuple(t.shape):
            raise CorruptCheckpoint(f"shape mismatch for {key!r}: {arr.shape} vs {tuple(t.shape)}")
        t.copy_(torch.from_numpy(arr.copy()).to(t.dtype))


@dataclass
class Checkpoint:
    store: ParameterStore
    run_config: str = ""
    rng_state: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)
    schema_version: int = SCHEMA_VERSION


def save_checkpoint(store: ParameterStore, path, run_config: str = "", rng_state=None, meta=None) -> Checkpoint:
    """Write ``store`` to ``path`` in the JGSEGCKP container format."""
    entries = []
    offset = 0
    for name, arr in store.arrays.items():
        nbytes = arr.size * 4
        entries.append({
            "name": name,
            "shape": list(arr.shape),
            "dtype": "<f4",
            "offset": offset,
            "nbytes": nbytes,
            "group": store.groups[name],
        })
        offset += nbytes
    manifest = {
        "arrays": entries,
        "payload_bytes": offset,
        "run_config": run_config,
        "rng_state": rng_state or {},
        "meta": meta or {},
    }
    header = json.dumps(manifest, sort_keys=True).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", SCHEMA_VERSION))
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        for arr in store.arrays.values():
            f.write(arr.astype("<f4", copy=False).tobytes(order="C"))
    os.replace(tmp, path)
    return Checkpoint(store, run_config, dict(rng_state or {}), dict(meta or {}))


def read_checkpoint(path) -> Checkpoint:
    data = Path(path).read_bytes()
    if len(data) < 20 or data[:8] != MAGIC:
        raise CorruptCheckpoint(f"{path}: bad magic or truncated header")
    (version,) = struct.unpack("<I", data[8:12])
    if version != SCHEMA_VERSION:
        raise UnsupportedSchema(f"{path}: schema version {version}, supported {SCHEMA_VERSION}")
    (hlen,) = struct.unpack("<Q", data[12:20])
    if 20 + hlen > len(data):
        raise CorruptCheckpoint(f"{path}: manifest truncated")
    try:
        manifest = json.loads(data[20:20 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptCheckpoint(f"{path}: unreadable manifest ({exc})") from exc
    payload = data[20 + hlen:]
    if len(payload) != manifest["payload_bytes"]:
        raise CorruptCheckpoint(
            f"{path}: payload has {len(payload)} bytes, manifest declares {manifest['payload_bytes']}"
        )
    store = ParameterStore()
    for e in manifest["arrays"]:
        chunk = payload[e["offset"]:e["offset"] + e["nbytes"]]
        arr = np.frombuffer(chunk, dtype="<f4").reshape(e["shape"]).astype(np.float32)
        store.add(e["name"], arr, e["group"])
    return Checkpoint(store, manifest["run_config"], manifest["rng_state"], manifest["meta"], version)


def load_checkpoint(path) -> ParameterStore:
    return read_checkpoint(path).store


def tensor_digest(tensors: Iterable[Tuple[str, torch.Tensor]]) -> str:
    h = hashlib.sha256()
    for name, t in tensors:
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


class seeded_init:
    """Context manager: build modules under a fixed torch seed without
    disturbing the caller's global RNG state."""

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._fork = None

    def __enter__(self):
        self._fork = torch.random.fork_rng(devices=[])
        self._fork.__enter__()
        torch.manual_seed(self.seed)
        return self

    def __exit__(self, *exc):
        return self._fork.__exit__(*exc)
