"""On-disk formats: EPSF float maps, binary PGM label masks, atomic writes."""

from __future__ import annotations

import hashlib
import json
import os
import re
import struct
import tempfile

import numpy as np

from .errors import DataError

EPSF_MAGIC = b"EPSF"
EPSF_VERSION = 1


def atomic_write_bytes(path, data: bytes):
    """Write via a temp file in the target directory, then rename over ``path``."""
    path = os.fspath(path)
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str):
    atomic_write_bytes(path, text.encode("utf-8"))


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_hash(obj) -> str:
    return hashlib.sha256(canonical_json(obj).encode("utf-8")).hexdigest()


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


# ---------------------------------------------------------------------- EPSF

def encode_epsf(arr) -> bytes:
    arr = np.asarray(arr)
    head = EPSF_MAGIC + struct.pack("<BI", EPSF_VERSION, arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + np.ascontiguousarray(arr, dtype="<f4").tobytes()


def decode_epsf(raw: bytes, name="<bytes>") -> np.ndarray:
    if raw[:4] != EPSF_MAGIC:
        raise DataError(f"{name}: not an EPSF file", field="magic")
    if len(raw) < 9:
        raise DataError(f"{name}: truncated header", field="rank")
    version, rank = struct.unpack_from("<BI", raw, 4)
    if version != EPSF_VERSION:
        raise DataError(f"{name}: unsupported EPSF version {version}", field="version")
    pos = 9
    if len(raw) < pos + 4 * rank:
        raise DataError(f"{name}: truncated dims", field="dims")
    dims = struct.unpack_from(f"<{rank}I", raw, pos)
    pos += 4 * rank
    count = int(np.prod(dims, dtype=np.int64))
    if len(raw) != pos + 4 * count:
        raise DataError(f"{name}: expected {count} values, payload is {len(raw) - pos} bytes", field="values")
    return np.frombuffer(raw, dtype="<f4", count=count, offset=pos).reshape(dims).astype(np.float64)


def write_epsf(path, arr):
    atomic_write_bytes(path, encode_epsf(arr))


def read_epsf(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return decode_epsf(fh.read(), name=os.fspath(path))


# ----------------------------------------------------------------------- PGM

def encode_pgm(mask) -> bytes:
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise DataError(f"PGM needs a 2-D mask, got shape {mask.shape}")
    if mask.size and (mask.min() < 0 or mask.max() > 255):
        raise DataError("PGM label values must lie in 0..255")
    h, w = mask.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + mask.astype(np.uint8).tobytes()


_PGM_HEADER = re.compile(rb"P5(?:\s+|#[^\n]*\n)+(\d+)(?:\s+|#[^\n]*\n)+(\d+)(?:\s+|#[^\n]*\n)+(\d+)\s")


def decode_pgm(raw: bytes, name="<bytes>") -> np.ndarray:
    m = _PGM_HEADER.match(raw)
    if not m:
        raise DataError(f"{name}: not a binary P5 PGM", field="magic")
    w, h, maxval = (int(g) for g in m.groups())
    if maxval != 255:
        raise DataError(f"{name}: maxval {maxval}, expected 255", field="maxval")
    body = raw[m.end():]
    if len(body) != w * h:
        raise DataError(f"{name}: expected {w * h} pixel bytes, got {len(body)}", field="pixels")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w).astype(np.int64)


def write_pgm(path, mask):
    atomic_write_bytes(path, encode_pgm(mask))


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return decode_pgm(fh.read(), name=os.fspath(path))
