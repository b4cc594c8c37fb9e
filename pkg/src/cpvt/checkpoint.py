"""Bit-exact checkpoint files.

Layout (all integers little-endian)::

    b"CPVTCKPT"            magic
    u32                    format version
    u32 + bytes            model config, canonical sorted key=value text (UTF-8)
    u32                    tensor count
    per tensor:            u16 name length, name, u8 itemsize (4 or 8), u8 ndim, u64 * ndim extents
    payloads               raw little-endian floats, in header order
    u64                    FNV-1a 64 digest of every preceding byte
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import CorruptionError, VersionError
from .model import CPVT, ModelConfig, build_model

MAGIC = b"CPVTCKPT"
FORMAT_VERSION = 1

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_MASK = (1 << 64) - 1


def fnv1a64(data: bytes) -> int:
    h = _FNV_OFFSET
    for b in data:
        h = ((h ^ b) * _FNV_PRIME) & _MASK
    return h


def encode(model: CPVT, version: int = FORMAT_VERSION) -> bytes:
    cfg_text = model.cfg.to_text().encode("utf-8")
    params = model.named_parameters()
    head = [MAGIC, struct.pack("<I", version), struct.pack("<I", len(cfg_text)), cfg_text,
            struct.pack("<I", len(params))]
    payload = []
    for name, t in params:
        nb = name.encode("utf-8")
        arr = np.ascontiguousarray(t.data)
        head.append(struct.pack("<H", len(nb)) + nb + struct.pack("<BB", arr.itemsize, arr.ndim))
        head.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        payload.append(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())
    body = b"".join(head + payload)
    return body + struct.pack("<Q", fnv1a64(body))


def decode(blob: bytes) -> CPVT:
    if len(blob) < len(MAGIC) + 16 or not blob.startswith(MAGIC):
        raise CorruptionError("not a checkpoint file (bad magic or too short)")
    body, (digest,) = blob[:-8], struct.unpack("<Q", blob[-8:])
    if fnv1a64(body) != digest:
        raise CorruptionError("checkpoint digest mismatch")
    pos = len(MAGIC)

    def take(fmt: str):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(body):
            raise CorruptionError("checkpoint header is truncated")
        vals = struct.unpack_from(fmt, body, pos)
        pos += size
        return vals

    (version,) = take("<I")
    if version != FORMAT_VERSION:
        raise VersionError(f"checkpoint format version {version}, expected {FORMAT_VERSION}")
    (cfg_len,) = take("<I")
    cfg = ModelConfig.from_text(body[pos:pos + cfg_len].decode("utf-8"))
    pos += cfg_len
    (count,) = take("<I")
    entries = []
    for _ in range(count):
        (nlen,) = take("<H")
        name = body[pos:pos + nlen].decode("utf-8")
        pos += nlen
        itemsize, ndim = take("<BB")
        shape = take(f"<{ndim}Q")
        if itemsize not in (4, 8):
            raise CorruptionError(f"{name}: unsupported item size {itemsize}")
        entries.append((name, np.dtype(f"<f{itemsize}"), tuple(shape)))
    model = build_model(cfg, seed=0)
    named = dict(model.named_parameters())
    if sorted(named) != sorted(n for n, _, _ in entries):
        raise CorruptionError("checkpoint tensors do not match the stored config")
    for name, dtype, shape in entries:
        nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        if pos + nbytes > len(body):
            raise CorruptionError("checkpoint payload is truncated")
        arr = np.frombuffer(body, dtype=dtype, count=nbytes // dtype.itemsize, offset=pos).reshape(shape)
        pos += nbytes
        target = named[name]
        if target.shape != shape:
            raise CorruptionError(f"{name}: stored shape {shape} vs model {target.shape}")
        target.data = arr.astype(dtype.newbyteorder("="), copy=True)
    if pos != len(body):
        raise CorruptionError("trailing bytes after checkpoint payload")
    return model


def save_checkpoint(model: CPVT, path) -> Path:
    path = Path(path)
    path.write_bytes(encode(model))
    return path


def load_checkpoint(path) -> CPVT:
    return decode(Path(path).read_bytes())
