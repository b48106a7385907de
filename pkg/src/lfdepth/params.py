"""Hierarchical parameter collections and their on-disk container.

``ModuleParams`` is an ordered tree of named trainable tensors; dotted paths
(e.g. ``cru.focal.s3.g1.psi.weight``) identify every leaf uniquely.  The
container format is a flat little-endian binary file:

    magic "LFDP" | u32 version=1 | u32 entry-count | entries
    entry = u16 name-length | UTF-8 name | u8 rank | u32 extents[rank]
            | f64 data[product(extents)]

Round-trips are bit-exact.
"""

from __future__ import annotations

import struct
from typing import BinaryIO, Iterator

import numpy as np

from .errors import FormatError, UsageError
from .tensor import Tensor

MAGIC = b"LFDP"
VERSION = 1


class ModuleParams:
    """Ordered map of name -> trainable tensor plus named sub-modules."""

    def __init__(self):
        self._entries: dict[str, Tensor] = {}
        self._children: dict[str, ModuleParams] = {}

    def add(self, name: str, data) -> Tensor:
        """Register a trainable leaf tensor under ``name`` and return it."""
        self._check_name(name)
        t = data if isinstance(data, Tensor) else Tensor(data)
        t.requires_grad = True
        self._entries[name] = t
        return t

    def child(self, name: str) -> "ModuleParams":
        """Return the sub-module ``name``, creating it if needed."""
        if name in self._children:
            return self._children[name]
        self._check_name(name)
        sub = ModuleParams()
        self._children[name] = sub
        return sub

    def _check_name(self, name: str) -> None:
        if not name or "." in name:
            raise UsageError(f"invalid parameter name {name!r}")
        if name in self._entries or name in self._children:
            raise UsageError(f"duplicate parameter name {name!r}")

    def named(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        """Yield (dotted path, tensor) pairs in registration order."""
        for name, t in self._entries.items():
            yield prefix + name, t
        for name, sub in self._children.items():
            yield from sub.named(prefix + name + ".")

    def tensors(self) -> list[tuple[str, Tensor]]:
        """All (path, tensor) pairs, verifying no tensor is aliased twice."""
        out = []
        seen: dict[int, str] = {}
        for path, t in self.named():
            if id(t) in seen:
                raise UsageError(f"tensor aliased at {seen[id(t)]!r} and {path!r}")
            seen[id(t)] = path
            out.append((path, t))
        return out

    def get(self, path: str) -> Tensor:
        node = self
        parts = path.split(".")
        for part in parts[:-1]:
            if part not in node._children:
                raise UsageError(f"unknown parameter path {path!r}")
            node = node._children[part]
        if parts[-1] not in node._entries:
            raise UsageError(f"unknown parameter path {path!r}")
        return node._entries[parts[-1]]

    def count(self) -> int:
        return sum(t.size for _, t in self.tensors())

    def zero_grad(self) -> None:
        for _, t in self.tensors():
            t.grad = None

    def gradients(self) -> dict[str, np.ndarray]:
        """Gradient map for every leaf that received one in the last backward."""
        return {path: t.grad for path, t in self.tensors() if t.grad is not None}

    def state(self) -> dict[str, np.ndarray]:
        return {path: t.data for path, t in self.tensors()}

    def load_state(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        """Assign arrays by path; in strict mode the key sets must match."""
        own = dict(self.tensors())
        if strict:
            missing = sorted(set(own) - set(state))
            extra = sorted(set(state) - set(own))
            if missing or extra:
                raise FormatError(
                    f"parameter set mismatch: missing {missing[:4]}, unexpected {extra[:4]}"
                )
        for path, arr in state.items():
            if path not in own:
                continue
            t = own[path]
            if arr.shape != t.shape:
                raise FormatError(f"shape mismatch for {path!r}: {arr.shape} vs {t.shape}")
            t.data = np.array(arr, dtype=np.float64, order="C")  # private copy


# -- container IO -------------------------------------------------------------


def write_container(fh: BinaryIO, entries: dict[str, np.ndarray]) -> None:
    fh.write(MAGIC)
    fh.write(struct.pack("<I", VERSION))
    fh.write(struct.pack("<I", len(entries)))
    for name, arr in entries.items():
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise UsageError(f"parameter name too long: {name[:32]!r}...")
        # np.ascontiguousarray would promote rank-0 arrays to rank 1
        arr = np.asarray(arr, dtype=np.float64)
        if not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        if arr.ndim > 0xFF:
            raise UsageError(f"rank {arr.ndim} exceeds container limit")
        fh.write(struct.pack("<H", len(raw)))
        fh.write(raw)
        fh.write(struct.pack("<B", arr.ndim))
        for n in arr.shape:
            fh.write(struct.pack("<I", n))
        fh.write(arr.tobytes())


def read_container(fh: BinaryIO) -> dict[str, np.ndarray]:
    def take(n: int, what: str) -> bytes:
        buf = fh.read(n)
        if len(buf) != n:
            raise FormatError(f"truncated container: {what} at offset {fh.tell() - len(buf)}")
        return buf

    if take(4, "magic") != MAGIC:
        raise FormatError("bad magic: not a parameter container")
    version = struct.unpack("<I", take(4, "version"))[0]
    if version != VERSION:
        raise FormatError(f"unsupported container version {version}")
    count = struct.unpack("<I", take(4, "entry count"))[0]
    entries: dict[str, np.ndarray] = {}
    for _ in range(count):
        name_len = struct.unpack("<H", take(2, "name length"))[0]
        name = take(name_len, "name").decode("utf-8")
        rank = struct.unpack("<B", take(1, "rank"))[0]
        shape = tuple(
            struct.unpack("<I", take(4, f"extent of {name!r}"))[0] for _ in range(rank)
        )
        n = int(np.prod(shape)) if shape else 1
        data = np.frombuffer(take(8 * n, f"data of {name!r}"), dtype="<f8").copy()
        if name in entries:
            raise FormatError(f"duplicate entry {name!r} in container")
        entries[name] = data.reshape(shape)
    return entries


def save_params(path, entries) -> None:
    """Write a ModuleParams tree or a {path: array} map to ``path``."""
    if isinstance(entries, ModuleParams):
        entries = entries.state()
    with open(path, "wb") as fh:
        write_container(fh, entries)


def load_params(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        return read_container(fh)
