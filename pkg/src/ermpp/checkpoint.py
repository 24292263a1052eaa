"""Bit-exact binary checkpoint format for :class:`ModelState`.

Layout (all integers little-endian)::

    magic       8 bytes   b"ERMPPCK\\0"
    version     u16       FORMAT_VERSION
    flags       u16       bit 0: averaged model
    layout      32 bytes  sha256 over (kind, name, shape) of every record
    step        u64
    n_params    u32
    n_bn        u32
    n_params x  [name_len u32][name utf-8][ndim u32][dims u32 * ndim][float64 data]
    n_bn x      [name_len u32][name utf-8][channels u32][mean f64 * C][var f64 * C]
    crc32       u32       over every preceding byte

Truncation or corruption past the fixed header is reported as a checksum
failure; files too short to hold a header raise a truncation error.
"""

from __future__ import annotations

import hashlib
import io
import struct
import zlib
from pathlib import Path

import numpy as np

from .errors import (
    CheckpointChecksumError,
    CheckpointFormatError,
    CheckpointTruncatedError,
    CheckpointVersionError,
)
from .nn import ModelState

MAGIC = b"ERMPPCK\x00"
FORMAT_VERSION = 1
FLAG_AVERAGED = 1
_HEADER = struct.Struct("<8sHH32sQII")
_F64 = np.dtype("<f8")


def layout_digest(state: ModelState) -> bytes:
    h = hashlib.sha256()
    for name, arr in state.params.items():
        h.update(f"p:{name}:{arr.shape};".encode())
    for name, (mean, _) in state.bn_stats.items():
        h.update(f"b:{name}:{mean.shape};".encode())
    return h.digest()


def _write_name(buf: io.BytesIO, name: str) -> None:
    raw = name.encode("utf-8")
    buf.write(struct.pack("<I", len(raw)))
    buf.write(raw)


def dumps(state: ModelState, averaged: bool = False) -> bytes:
    buf = io.BytesIO()
    flags = FLAG_AVERAGED if averaged else 0
    buf.write(
        _HEADER.pack(
            MAGIC, FORMAT_VERSION, flags, layout_digest(state), state.step,
            len(state.params), len(state.bn_stats),
        )
    )
    for name, arr in state.params.items():
        _write_name(buf, name)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype=_F64).tobytes())
    for name, (mean, var) in state.bn_stats.items():
        _write_name(buf, name)
        buf.write(struct.pack("<I", mean.shape[0]))
        buf.write(np.ascontiguousarray(mean, dtype=_F64).tobytes())
        buf.write(np.ascontiguousarray(var, dtype=_F64).tobytes())
    body = buf.getvalue()
    return body + struct.pack("<I", zlib.crc32(body))


class _Reader:
    def __init__(self, data: bytes, offset: int):
        self.data = data
        self.pos = offset

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointFormatError("record runs past end of payload")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def name(self) -> str:
        return self.take(self.u32()).decode("utf-8")

    def floats(self, count: int) -> np.ndarray:
        return np.frombuffer(self.take(8 * count), dtype=_F64).astype(np.float64)


def read_header(data: bytes) -> dict:
    if len(data) < _HEADER.size + 4:
        raise CheckpointTruncatedError(f"checkpoint is {len(data)} bytes, shorter than its header")
    magic, version, flags, layout, step, n_params, n_bn = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise CheckpointFormatError(f"bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"checkpoint version {version}, expected {FORMAT_VERSION}")
    return {
        "version": version, "averaged": bool(flags & FLAG_AVERAGED), "layout": layout,
        "step": step, "n_params": n_params, "n_bn": n_bn,
    }


def loads(data: bytes) -> ModelState:
    header = read_header(data)
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) != crc:
        raise CheckpointChecksumError("checkpoint CRC32 mismatch (truncated or corrupted)")
    r = _Reader(body, _HEADER.size)
    params: dict[str, np.ndarray] = {}
    for _ in range(header["n_params"]):
        name = r.name()
        ndim = r.u32()
        shape = struct.unpack(f"<{ndim}I", r.take(4 * ndim))
        params[name] = r.floats(int(np.prod(shape, dtype=np.int64))).reshape(shape)
    stats: dict[str, tuple[np.ndarray, np.ndarray]] = {}
    for _ in range(header["n_bn"]):
        name = r.name()
        c = r.u32()
        stats[name] = (r.floats(c), r.floats(c))
    if r.pos != len(body):
        raise CheckpointFormatError(f"{len(body) - r.pos} trailing bytes after last record")
    state = ModelState(params, stats, header["step"])
    if layout_digest(state) != header["layout"]:
        raise CheckpointFormatError("layout digest does not match records")
    return state


def save_checkpoint(state: ModelState, path, averaged: bool = False) -> str:
    """Write ``state`` to ``path``; returns the sha256 hex digest of the file."""
    data = dumps(state, averaged)
    Path(path).write_bytes(data)
    return hashlib.sha256(data).hexdigest()


def load_checkpoint(path) -> ModelState:
    return loads(Path(path).read_bytes())


def is_averaged(path) -> bool:
    return read_header(Path(path).read_bytes())["averaged"]


def state_digest(state: ModelState, averaged: bool = False) -> str:
    return hashlib.sha256(dumps(state, averaged)).hexdigest()
