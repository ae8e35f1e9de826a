"""Versioned binary container for named parameter arrays.

Layout (little-endian): magic ``NEONETCK``, u16 version, u32 blob count,
then per blob u16 name length, UTF-8 name, u8 dtype code, u8 ndim, u32
extents and raw C-order bytes. A sha256 of everything before it closes the
file. A YAML text manifest with provenance sits next to each checkpoint.
"""

from __future__ import annotations

import hashlib
import os
import struct
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np
import yaml

from .errors import ChecksumError, ShapeError
from .volgrid import Node

MAGIC = b"NEONETCK"
VERSION = 1
DIGEST_SIZE = 32
DTYPE_CODES = {"<f8": 0, "<f4": 1, "<i8": 2}
CODE_DTYPES = {code: np.dtype(s) for s, code in DTYPE_CODES.items()}


def _atomic_write(path: Path, data: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def manifest_path(path: Path) -> Path:
    return path.with_suffix(".yaml")


def encode(blobs: Iterable[tuple[str, np.ndarray]]) -> bytes:
    items = list(blobs)
    parts = [MAGIC, struct.pack("<HI", VERSION, len(items))]
    for name, array in items:
        array = np.asarray(array)
        dtype = array.dtype.newbyteorder("<")
        if dtype.str not in DTYPE_CODES:
            raise ShapeError(f"checkpoint blob {name!r}: unsupported dtype {array.dtype}")
        raw_name = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw_name)) + raw_name)
        parts.append(struct.pack("<BB", DTYPE_CODES[dtype.str], array.ndim))
        parts.append(struct.pack(f"<{array.ndim}I", *array.shape))
        parts.append(np.ascontiguousarray(array, dtype=dtype).tobytes())
    body = b"".join(parts)
    return body + hashlib.sha256(body).digest()


def decode(data: bytes, source: str = "<bytes>") -> dict[str, np.ndarray]:
    if len(data) < len(MAGIC) + 6 + DIGEST_SIZE or not data.startswith(MAGIC):
        raise ChecksumError(source, "not a neonet checkpoint")
    body, digest = data[:-DIGEST_SIZE], data[-DIGEST_SIZE:]
    if hashlib.sha256(body).digest() != digest:
        raise ChecksumError(source, "sha256 digest mismatch")
    version, count = struct.unpack_from("<HI", body, len(MAGIC))
    if version != VERSION:
        raise ChecksumError(source, f"unsupported version {version}")

    blobs: dict[str, np.ndarray] = {}
    pos = len(MAGIC) + 6
    try:
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", body, pos)
            pos += 2
            name = body[pos : pos + name_len].decode("utf-8")
            pos += name_len
            code, ndim = struct.unpack_from("<BB", body, pos)
            pos += 2
            shape = struct.unpack_from(f"<{ndim}I", body, pos)
            pos += 4 * ndim
            dtype = CODE_DTYPES[code]
            nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
            if pos + nbytes > len(body):
                raise ChecksumError(source, f"blob {name!r} runs past the end of the file")
            blobs[name] = np.frombuffer(body, dtype=dtype, count=nbytes // dtype.itemsize, offset=pos).reshape(shape).copy()
            pos += nbytes
    except (struct.error, KeyError, UnicodeDecodeError) as e:
        raise ChecksumError(source, f"malformed blob table ({e})") from e
    if pos != len(body):
        raise ChecksumError(source, f"{len(body) - pos} trailing bytes after the blob table")
    return blobs


def save_checkpoint(
    path: str | Path,
    named: Sequence[tuple[str, Node | np.ndarray]],
    manifest: dict[str, Any] | None = None,
) -> Path:
    path = Path(path)
    blobs = [(name, p.value if isinstance(p, Node) else p) for name, p in named]
    _atomic_write(path, encode(blobs))
    if manifest is not None:
        text = yaml.safe_dump(manifest, sort_keys=True, default_flow_style=False)
        _atomic_write(manifest_path(path), text.encode("utf-8"))
    return path


def load_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    path = Path(path)
    try:
        data = path.read_bytes()
    except FileNotFoundError:
        raise ChecksumError(str(path), "file not found") from None
    return decode(data, str(path))


def load_manifest(path: str | Path) -> dict[str, Any]:
    with open(manifest_path(Path(path))) as f:
        return yaml.safe_load(f) or {}


def restore(named: Sequence[tuple[str, Node]], blobs: dict[str, np.ndarray], source: str = "") -> None:
    """Copy stored values into freshly initialised parameters of the same layout."""
    for name, p in named:
        if name not in blobs:
            raise ChecksumError(source, f"missing blob {name!r}")
        stored = blobs[name]
        if stored.shape != p.shape:
            raise ShapeError(f"{name}: checkpoint shape {stored.shape} does not match {p.shape}")
        p.value[...] = stored
