"""Binary checkpoint format.

Layout, all integers little-endian::

    b"RDXC"  u32 version=1
    u32 config length, UTF-8 JSON NetworkConfig
    u32 tensor count
    per tensor: u16 name length, name, u8 dtype, u8 rank, u32 dims[rank], row-major payload

dtype 0 is float32 and 1 is float64. Single preprocessed tensors use the same
per-tensor record behind a ``b"RDXT"`` + u32 version header.
"""

from __future__ import annotations

import json
import os
import struct

import numpy as np

from .network import Network, NetworkConfig, build_network

MAGIC = b"RDXC"
TENSOR_MAGIC = b"RDXT"
VERSION = 1

_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


class CheckpointError(ValueError):
    pass


class BadMagicError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class CheckpointShapeError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


def _pack_tensor(name: str, arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    if arr.dtype not in _CODES:
        raise CheckpointError(f"{name}: unsupported dtype {arr.dtype}")
    raw = name.encode("utf-8")
    head = struct.pack("<H", len(raw)) + raw + struct.pack("<BB", _CODES[arr.dtype], arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + np.ascontiguousarray(arr, dtype=_DTYPES[_CODES[arr.dtype]]).tobytes()


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedCheckpointError(
                f"file ends at byte {len(self.data)}, needed {self.pos + n}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def tensor(self) -> tuple[str, np.ndarray]:
        (nlen,) = self.unpack("<H")
        name = self.take(nlen).decode("utf-8")
        code, rank = self.unpack("<BB")
        if code not in _DTYPES:
            raise CheckpointError(f"{name}: unknown dtype code {code}")
        dims = self.unpack(f"<{rank}I")
        dt = _DTYPES[code]
        count = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(self.take(count * dt.itemsize), dtype=dt).reshape(dims)
        return name, arr.astype(dt.newbyteorder("="))


def _header(r: _Reader, magic: bytes) -> None:
    got = r.take(4) if len(r.data) >= 4 else r.data
    if got != magic:
        if len(got) < 4 and magic.startswith(got):
            raise TruncatedCheckpointError("file shorter than its magic number")
        raise BadMagicError(f"expected magic {magic!r}, found {got!r}")
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise VersionMismatchError(f"format version {version}, this build reads {VERSION}")


def checkpoint_bytes(net: Network) -> bytes:
    blob = json.dumps(net.config.to_json(), sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [MAGIC, struct.pack("<I", VERSION), struct.pack("<I", len(blob)), blob]
    tensors = net.state_dict()
    parts.append(struct.pack("<I", len(tensors)))
    parts.extend(_pack_tensor(k, v) for k, v in tensors.items())
    return b"".join(parts)


def _atomic_write(path, data: bytes) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def save_checkpoint(net: Network, path) -> None:
    _atomic_write(path, checkpoint_bytes(net))


def checkpoint_from_bytes(data: bytes) -> Network:
    r = _Reader(data)
    _header(r, MAGIC)
    (blen,) = r.unpack("<I")
    try:
        config = NetworkConfig.from_json(json.loads(r.take(blen).decode("utf-8")))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"config blob is not valid JSON: {exc}") from exc
    (count,) = r.unpack("<I")
    tensors = dict(r.tensor() for _ in range(count))
    if r.pos != len(data):
        raise CheckpointError(f"{len(data) - r.pos} trailing bytes after last tensor")
    dtypes = {v.dtype for v in tensors.values()}
    if len(dtypes) > 1:
        raise CheckpointError(f"mixed tensor dtypes {dtypes}")
    net = build_network(config, dtype=dtypes.pop() if dtypes else np.float32)
    try:
        net.load_state(tensors)
    except ValueError as exc:
        raise CheckpointShapeError(str(exc)) from exc
    return net


def load_checkpoint(path) -> Network:
    with open(path, "rb") as fh:
        return checkpoint_from_bytes(fh.read())


def save_tensor(path, arr: np.ndarray, name: str = "image") -> None:
    _atomic_write(path, TENSOR_MAGIC + struct.pack("<I", VERSION) + _pack_tensor(name, arr))


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    r = _Reader(data)
    _header(r, TENSOR_MAGIC)
    _, arr = r.tensor()
    if r.pos != len(data):
        raise CheckpointError("trailing bytes after tensor")
    return arr
