"""Self-describing binary container for model parameters, latents and results.

Layout (all integers little-endian)::

    magic     8 bytes   b"ENVFLD\\x00\\x01"   (last byte is the format version)
    u32       header length in bytes
    header    UTF-8 text, one ``key = value`` pair per line
    u32       tensor count
    per tensor:
        u16   name length, then UTF-8 name
        u8    dtype code (0 float32, 1 float64, 2 int64)
        u8    ndim, then ndim x u32 dims
        data  little-endian IEEE-754 / two's complement, C order
"""

from __future__ import annotations

import os
import struct
from collections.abc import Mapping

import numpy as np

MAGIC = b"ENVFLD\x00"
VERSION = 1

_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8")}
_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1, np.dtype("int64"): 2}


class CheckpointError(Exception):
    pass


def format_header(header: Mapping[str, object]) -> str:
    lines = []
    for key, value in header.items():
        text = str(value)
        if "\n" in text or "=" in str(key):
            raise CheckpointError(f"header entry {key!r} cannot be stored as a single key = value line")
        lines.append(f"{key} = {text}")
    return "\n".join(lines)


def parse_header(text: str) -> dict[str, str]:
    """Parse ``key = value`` lines; blank lines and ``#`` comments are skipped."""
    out: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise CheckpointError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def save_checkpoint(path, header: Mapping[str, object], tensors: Mapping[str, np.ndarray]) -> None:
    parts = [MAGIC, bytes([VERSION])]
    htext = format_header(header).encode("utf-8")
    parts += [struct.pack("<I", len(htext)), htext, struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        if arr.dtype.kind == "i" or arr.dtype.kind == "u":
            arr = arr.astype(np.int64)
        if arr.dtype not in _CODES:
            raise CheckpointError(f"tensor {name!r}: unsupported dtype {arr.dtype}")
        bname = name.encode("utf-8")
        parts.append(struct.pack("<H", len(bname)) + bname)
        parts.append(struct.pack("<BB", _CODES[arr.dtype], arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=_DTYPES[_CODES[arr.dtype]]).tobytes())
    try:
        with open(path, "wb") as f:
            f.write(b"".join(parts))
    except OSError as exc:
        raise CheckpointError(f"cannot write checkpoint {os.fspath(path)!r}: {exc.strerror}") from exc


def load_checkpoint(path) -> tuple[dict[str, str], dict[str, np.ndarray]]:
    try:
        with open(path, "rb") as f:
            buf = f.read()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {os.fspath(path)!r}: {exc.strerror}") from exc

    pos = 0

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(buf):
            raise CheckpointError(f"{os.fspath(path)}: truncated at byte {pos}")
        chunk = buf[pos : pos + n]
        pos += n
        return chunk

    if take(len(MAGIC)) != MAGIC:
        raise CheckpointError(f"{os.fspath(path)}: not an envfield checkpoint")
    version = take(1)[0]
    if version != VERSION:
        raise CheckpointError(f"{os.fspath(path)}: unsupported checkpoint version {version}")
    (hlen,) = struct.unpack("<I", take(4))
    header = parse_header(take(hlen).decode("utf-8"))
    (count,) = struct.unpack("<I", take(4))
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        name = take(nlen).decode("utf-8")
        code, ndim = struct.unpack("<BB", take(2))
        if code not in _DTYPES:
            raise CheckpointError(f"{os.fspath(path)}: tensor {name!r} has unknown dtype code {code}")
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        dt = _DTYPES[code]
        nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        tensors[name] = np.frombuffer(take(nbytes), dtype=dt).reshape(shape).copy()
    return header, tensors


def append_tensors(path, tensors: Mapping[str, np.ndarray], header: Mapping[str, object] | None = None) -> None:
    """Add (or replace) named tensors and header entries in an existing file."""
    old_header, old_tensors = load_checkpoint(path)
    old_header.update({k: str(v) for k, v in (header or {}).items()})
    old_tensors.update({k: np.asarray(v) for k, v in tensors.items()})
    save_checkpoint(path, old_header, old_tensors)
