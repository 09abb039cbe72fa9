"""Binary container shared by checkpoints and embedding-bank files.

Layout (all integers little-endian)::

    magic            8 bytes
    version          u32
    total_length     u64   length of the whole file, for truncation checks
    digest           32 bytes  sha256 of the metadata JSON
    metadata_length  u32, then UTF-8 JSON metadata
    for each section:
        entry_count  u32
        entries      name_len u16, name, dtype tag u8, ndim u8,
                     ndim x u32 dims, raw little-endian buffer

Metadata JSON is written with sorted keys so equal inputs give equal bytes.
"""

from __future__ import annotations

import hashlib
import io
import json
import struct

import numpy as np

VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8")}
_TAGS = {np.dtype(v).newbyteorder("="): k for k, v in _DTYPES.items()}
_HEADER = struct.Struct("<8sIQ32s")


class FormatError(ValueError):
    pass


def canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def digest(obj) -> str:
    return hashlib.sha256(canonical_json(obj)).hexdigest()


def _write_entries(buf: io.BytesIO, entries: dict[str, np.ndarray]) -> None:
    buf.write(struct.pack("<I", len(entries)))
    for name, arr in entries.items():
        arr = np.asarray(arr)
        tag = _TAGS.get(arr.dtype.newbyteorder("="))
        if tag is None:
            raise TypeError(f"{name}: unsupported dtype {arr.dtype}")
        raw_name = name.encode("utf-8")
        buf.write(struct.pack("<H", len(raw_name)))
        buf.write(raw_name)
        buf.write(struct.pack("<BB", tag, arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype=_DTYPES[tag]).tobytes())


def encode(magic: bytes, metadata: dict, sections: list[dict[str, np.ndarray]]) -> bytes:
    assert len(magic) == 8
    meta = canonical_json(metadata)
    body = io.BytesIO()
    body.write(struct.pack("<I", len(meta)))
    body.write(meta)
    for section in sections:
        _write_entries(body, section)
    payload = body.getvalue()
    total = _HEADER.size + len(payload)
    return _HEADER.pack(magic, VERSION, total, hashlib.sha256(meta).digest()) + payload


class _Reader:
    def __init__(self, data: bytes, source: str):
        self.data = data
        self.pos = 0
        self.source = source

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError(f"{self.source}: unexpected end of data at byte {self.pos}")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        s = struct.Struct(fmt)
        return s.unpack(self.take(s.size))


def decode(data: bytes, magic: bytes, n_sections: int, source: str = "<bytes>"):
    """Inverse of :func:`encode`; returns ``(metadata, sections)``."""
    fixed = _HEADER.size
    if len(data) < fixed:
        raise FormatError(f"{source}: file is {len(data)} bytes, shorter than the {fixed}-byte header")
    got_magic, version, total, meta_digest = _HEADER.unpack(data[:fixed])
    if got_magic != magic:
        raise FormatError(f"{source}: bad magic {got_magic!r}, expected {magic!r}")
    if version != VERSION:
        raise FormatError(f"{source}: format version {version} unsupported (expected {VERSION})")
    if total != len(data):
        raise FormatError(f"{source}: expected {total} bytes but file has {len(data)}")
    r = _Reader(data, source)
    r.pos = fixed
    (meta_len,) = r.unpack("<I")
    meta = r.take(meta_len)
    if hashlib.sha256(meta).digest() != meta_digest:
        raise FormatError(f"{source}: metadata digest mismatch")
    metadata = json.loads(meta.decode("utf-8"))
    sections = []
    for _ in range(n_sections):
        (count,) = r.unpack("<I")
        entries = {}
        for _ in range(count):
            (name_len,) = r.unpack("<H")
            name = r.take(name_len).decode("utf-8")
            tag, ndim = r.unpack("<BB")
            if tag not in _DTYPES:
                raise FormatError(f"{source}: entry {name!r} has unknown dtype tag {tag}")
            shape = r.unpack(f"<{ndim}I") if ndim else ()
            dt = _DTYPES[tag]
            nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
            arr = np.frombuffer(r.take(nbytes), dtype=dt).reshape(shape)
            entries[name] = arr.astype(dt.newbyteorder("="))
        sections.append(entries)
    if r.pos != len(data):
        raise FormatError(f"{source}: {len(data) - r.pos} trailing bytes")
    return metadata, sections
