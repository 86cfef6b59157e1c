"""The ``.cmps`` scalable bitstream container.

Layout (all integers big-endian)::

    magic      4 bytes  b"CMPS"
    version    u8
    layers     u8       K + 1
    quality    u8       model index
    dims       layers x (u16 H, u16 W)
    index      layers x (u32 length, u32 adler32 of the substream)
    payloads   substreams in layer order

Each substream is ``u32 len(z) | z bytes | y bytes``. Substreams never
depend on later layers, so dropping trailing layers (and rewriting the
header) leaves a valid stream for the remaining ones.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass

MAGIC = b"CMPS"
VERSION = 1
_FIXED = struct.Struct(">4sBBB")
_DIMS = struct.Struct(">HH")
_INDEX = struct.Struct(">II")
_ZLEN = struct.Struct(">I")


class BitstreamError(ValueError):
    pass


@dataclass
class ScalableBitstream:
    quality: int
    dims: list[tuple[int, int]]
    substreams: list[bytes]
    version: int = VERSION

    @property
    def num_layers(self) -> int:
        return len(self.substreams)


def pack_substream(z_bytes: bytes, y_bytes: bytes) -> bytes:
    return _ZLEN.pack(len(z_bytes)) + z_bytes + y_bytes


def split_substream(sub: bytes) -> tuple[bytes, bytes]:
    if len(sub) < _ZLEN.size:
        raise BitstreamError("substream shorter than its length field")
    (zlen,) = _ZLEN.unpack_from(sub)
    if _ZLEN.size + zlen > len(sub):
        raise BitstreamError("z length exceeds substream")
    return sub[_ZLEN.size : _ZLEN.size + zlen], sub[_ZLEN.size + zlen :]


def pack(substreams: list[bytes], dims: list[tuple[int, int]], quality: int = 0) -> bytes:
    if len(substreams) != len(dims):
        raise ValueError("one dims entry per substream required")
    if not 1 <= len(substreams) <= 255:
        raise ValueError("layer count must be in [1, 255]")
    if not 0 <= quality <= 255:
        raise ValueError("quality index must fit in a byte")
    parts = [_FIXED.pack(MAGIC, VERSION, len(substreams), quality)]
    for h, w in dims:
        if not (1 <= h <= 0xFFFF and 1 <= w <= 0xFFFF):
            raise ValueError(f"layer dims {(h, w)} out of range")
        parts.append(_DIMS.pack(h, w))
    for sub in substreams:
        parts.append(_INDEX.pack(len(sub), zlib.adler32(sub)))
    parts.extend(substreams)
    return b"".join(parts)


def unpack(data: bytes, verify: bool = True) -> ScalableBitstream:
    if len(data) < _FIXED.size:
        raise BitstreamError("stream too short for header")
    magic, version, n, quality = _FIXED.unpack_from(data)
    if magic != MAGIC:
        raise BitstreamError(f"bad magic {magic!r}")
    if version != VERSION:
        raise BitstreamError(f"unsupported version {version}")
    if n < 1:
        raise BitstreamError("stream declares no layers")
    pos = _FIXED.size
    header_end = pos + n * (_DIMS.size + _INDEX.size)
    if len(data) < header_end:
        raise BitstreamError("truncated header")
    dims = []
    for _ in range(n):
        dims.append(_DIMS.unpack_from(data, pos))
        pos += _DIMS.size
    index = []
    for _ in range(n):
        index.append(_INDEX.unpack_from(data, pos))
        pos += _INDEX.size
    subs = []
    for k, (length, checksum) in enumerate(index):
        sub = data[pos : pos + length]
        if len(sub) != length:
            raise BitstreamError(f"layer {k} truncated")
        if verify and zlib.adler32(sub) != checksum:
            raise BitstreamError(f"layer {k} checksum mismatch")
        subs.append(sub)
        pos += length
    if pos != len(data):
        raise BitstreamError(f"{len(data) - pos} trailing bytes after last layer")
    return ScalableBitstream(quality, [tuple(d) for d in dims], subs, version)


def extract_prefix(data: bytes, k: int) -> bytes:
    """Stream holding layers 0..k only."""
    s = unpack(data)
    if not 0 <= k < s.num_layers:
        raise BitstreamError(f"layer {k} not in stream with {s.num_layers} layers")
    return pack(s.substreams[: k + 1], s.dims[: k + 1], s.quality)


def header_size(num_layers: int) -> int:
    return _FIXED.size + num_layers * (_DIMS.size + _INDEX.size)
