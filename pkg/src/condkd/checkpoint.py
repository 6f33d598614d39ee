"""Checkpoint container: a flat name -> float64 array mapping in a small
self-describing binary format.

Layout: magic "ICDC", version u32, tensor count u32, then per tensor a u16
name length, the UTF-8 name, a u8 rank, u32 dims, and the row-major float64
payload. All integers and floats little-endian. Loads are bit-exact.
"""

from __future__ import annotations

import struct

import numpy as np

from .tensor import ParamGroup

MAGIC = b"ICDC"
VERSION = 1


class CheckpointError(Exception):
    """Malformed checkpoint; message carries the byte offset of the fault."""


def save_checkpoint(path: str, tensors: dict[str, np.ndarray]) -> None:
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, arr in tensors.items():
        a = np.asarray(arr, dtype="<f8")  # tobytes() below emits C order
        enc = name.encode("utf-8")
        if len(enc) > 0xFFFF:
            raise ValueError(f"tensor name too long: {name[:32]}...")
        parts.append(struct.pack("<H", len(enc)))
        parts.append(enc)
        parts.append(struct.pack("<B", a.ndim))
        parts.append(struct.pack(f"<{a.ndim}I", *a.shape))
        parts.append(a.tobytes())
    with open(path, "wb") as f:
        f.write(b"".join(parts))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.off = 0

    def take(self, n: int, what: str) -> bytes:
        if self.off + n > len(self.buf):
            raise CheckpointError(
                f"truncated checkpoint: needed {n} bytes for {what} at offset {self.off}, "
                f"file has {len(self.buf)}")
        out = self.buf[self.off:self.off + n]
        self.off += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def load_checkpoint(path: str) -> dict[str, np.ndarray]:
    with open(path, "rb") as f:
        r = _Reader(f.read())
    if r.take(4, "magic") != MAGIC:
        raise CheckpointError("bad magic at offset 0: not a checkpoint file")
    version, count = r.unpack("<II", "header")
    if version != VERSION:
        raise CheckpointError(f"unsupported version {version} at offset 4")
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = r.unpack("<H", "name length")
        name = r.take(name_len, "name").decode("utf-8")
        (ndim,) = r.unpack("<B", f"rank of {name}")
        shape = r.unpack(f"<{ndim}I", f"dims of {name}") if ndim else ()
        n = int(np.prod(shape, dtype=np.int64)) if shape else 1
        data = r.take(8 * n, f"data of {name}")
        out[name] = np.frombuffer(data, dtype="<f8").reshape(shape).astype(np.float64)
    if r.off != len(r.buf):
        raise CheckpointError(f"trailing garbage at offset {r.off}")
    return out


def group_state(group: ParamGroup) -> dict[str, np.ndarray]:
    return {name: p.data.copy() for name, p in group.named()}


def load_group(group: ParamGroup, state: dict[str, np.ndarray]) -> None:
    """Strict load: names and shapes must agree exactly."""
    names = dict(group.named())
    missing = sorted(set(names) - set(state))
    extra = sorted(set(state) - set(names))
    if missing or extra:
        raise CheckpointError(f"parameter set mismatch: missing {missing}, unexpected {extra}")
    for name, p in names.items():
        if state[name].shape != p.data.shape:
            raise CheckpointError(
                f"shape mismatch for {name}: checkpoint {state[name].shape} vs model {p.data.shape}")
        p.data[...] = state[name]
