"""Low-rank adapters: ``delta W = scale * B @ A`` on a layer's (d, k) weight.

Binary layout of one adapter (all integers little-endian)::

    b"MILA" | u32 version=1 | u32 name_len | u32 d | u32 k | u32 r
    | u64 value_count | name (utf-8) | f64 scale | A (r*k, row-major) | B (d*r, row-major)

The fixed header is 32 bytes, so an encoded adapter takes
``32 + len(name) + 8 * (r*k + d*r + 1)`` bytes.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import (CorruptHeaderError, DecodeError, RankError, ShapeError,
                     TruncatedPayloadError, VersionMismatchError)
from .nn import LinearizedLayer

MAGIC = b"MILA"
VERSION = 1
INIT_STD = 0.02
_HEADER = struct.Struct("<4sIIIIIQ")


@dataclass
class LoraAdapter:
    layer_name: str
    A: np.ndarray  # (r, k)
    B: np.ndarray  # (d, r)
    scale: float = 1.0

    @property
    def r(self) -> int:
        return self.A.shape[0]

    @property
    def d(self) -> int:
        return self.B.shape[0]

    @property
    def k(self) -> int:
        return self.A.shape[1]

    @property
    def num_params(self) -> int:
        return self.A.size + self.B.size

    def freeze(self) -> None:
        self.A.flags.writeable = False
        self.B.flags.writeable = False

    def copy(self) -> "LoraAdapter":
        return LoraAdapter(self.layer_name, self.A.copy(), self.B.copy(), self.scale)


def init_adapter(layer: LinearizedLayer, r: int, seed: int, scale: float = 1.0) -> LoraAdapter:
    """Gaussian ``A`` (std 0.02), zero ``B``: the fresh delta is exactly zero."""
    if not 1 <= r <= min(layer.d, layer.k):
        raise RankError(f"rank {r} for layer {layer.name!r} must satisfy 1 <= r <= "
                        f"min(d={layer.d}, k={layer.k})")
    rng = np.random.default_rng(seed)
    A = rng.normal(0.0, INIT_STD, size=(r, layer.k))
    B = np.zeros((layer.d, r))
    return LoraAdapter(layer.name, A, B, float(scale))


def delta(adapter: LoraAdapter) -> np.ndarray:
    return adapter.scale * (adapter.B @ adapter.A)


def merge(W: np.ndarray, adapter: LoraAdapter) -> np.ndarray:
    """``W + delta(adapter)`` as a new array."""
    if W.shape != (adapter.d, adapter.k):
        raise ShapeError(f"weight {W.shape} vs adapter ({adapter.d}, {adapter.k})")
    return W + delta(adapter)


def adapter_param_count(d: int, k: int, r: int) -> int:
    return r * (d + k)


def encoded_size(adapter: LoraAdapter) -> int:
    name = adapter.layer_name.encode()
    return _HEADER.size + len(name) + 8 * (adapter.r * adapter.k + adapter.d * adapter.r + 1)


def save_adapter(adapter: LoraAdapter) -> bytes:
    name = adapter.layer_name.encode()
    count = 1 + adapter.A.size + adapter.B.size
    return b"".join([
        _HEADER.pack(MAGIC, VERSION, len(name), adapter.d, adapter.k, adapter.r, count),
        name,
        struct.pack("<d", adapter.scale),
        np.ascontiguousarray(adapter.A, dtype="<f8").tobytes(),
        np.ascontiguousarray(adapter.B, dtype="<f8").tobytes(),
    ])


def read_adapter(buf: bytes | memoryview, offset: int = 0) -> tuple[LoraAdapter, int]:
    """Decode one adapter starting at ``offset``; returns it and the end offset."""
    buf = memoryview(buf)
    avail = len(buf) - offset
    if avail < _HEADER.size:
        head = bytes(buf[offset:offset + 4])
        if head != MAGIC[:len(head)]:
            raise CorruptHeaderError(f"bad adapter magic {head!r}")
        raise TruncatedPayloadError("adapter header truncated")
    magic, version, name_len, d, k, r, count = _HEADER.unpack_from(buf, offset)
    if magic != MAGIC:
        raise CorruptHeaderError(f"bad adapter magic {magic!r}")
    if version != VERSION:
        raise VersionMismatchError(f"adapter version {version}, expected {VERSION}")
    if not (1 <= r <= min(d, k)) or count != 1 + r * k + d * r:
        raise CorruptHeaderError(f"inconsistent adapter header d={d} k={k} r={r} values={count}")
    pos = offset + _HEADER.size
    end = pos + name_len + 8 * count
    if len(buf) < end:
        raise TruncatedPayloadError(f"adapter needs {end - offset} bytes, got {len(buf) - offset}")
    try:
        name = bytes(buf[pos:pos + name_len]).decode()
    except UnicodeDecodeError as exc:
        raise CorruptHeaderError("adapter name is not utf-8") from exc
    pos += name_len
    values = np.frombuffer(buf[pos:end], dtype="<f8").astype(np.float64)
    scale = float(values[0])
    A = values[1:1 + r * k].reshape(r, k).copy()
    B = values[1 + r * k:].reshape(d, r).copy()
    return LoraAdapter(name, A, B, scale), end


def load_adapter(data: bytes) -> LoraAdapter:
    adapter, end = read_adapter(data)
    if end != len(data):
        raise DecodeError(f"{len(data) - end} trailing bytes after adapter")
    return adapter
