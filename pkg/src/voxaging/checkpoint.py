"""Versioned binary checkpoints.

Layout (little endian): magic "NARC", u32 format version, u32 tensor count,
then per tensor: u16 name length + UTF-8 name, u8 dtype tag, u8 rank,
u32 extents, raw payload; footer: u16 length + UTF-8 config hash. Tensors are
written in sorted-name order so identical states produce identical bytes.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct

import numpy as np

MAGIC = b"NARC"
FORMAT_VERSION = 1

_DTYPE_TAGS = {np.dtype("<f4"): 0, np.dtype("<f8"): 1, np.dtype("<i8"): 2, np.dtype("u1"): 3}
_TAG_DTYPES = {v: k for k, v in _DTYPE_TAGS.items()}


class CheckpointFormatError(ValueError):
    pass


class ConfigHashMismatch(ValueError):
    pass


def config_hash(config_subset: dict) -> str:
    """sha256 of the canonical JSON encoding of a config subset."""
    blob = json.dumps(config_subset, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


def save_checkpoint(path: str, arrays: dict[str, np.ndarray], cfg_hash: str,
                    version: int = FORMAT_VERSION) -> None:
    chunks = [MAGIC, struct.pack("<II", version, len(arrays))]
    for name in sorted(arrays):
        # note: ascontiguousarray would promote rank-0 tensors to rank 1
        arr = np.asarray(arrays[name], order="C")
        dt = arr.dtype.newbyteorder("<") if arr.dtype.byteorder == ">" else arr.dtype
        if dt not in _DTYPE_TAGS:
            if np.issubdtype(arr.dtype, np.integer):
                arr = arr.astype("<i8")
            else:
                raise CheckpointFormatError(f"unsupported dtype {arr.dtype} for tensor '{name}'")
        nb = name.encode()
        chunks.append(struct.pack("<H", len(nb)))
        chunks.append(nb)
        chunks.append(struct.pack("<BB", _DTYPE_TAGS[arr.dtype], arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape) if arr.ndim else b"")
        chunks.append(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())
    hb = cfg_hash.encode()
    chunks.append(struct.pack("<H", len(hb)))
    chunks.append(hb)
    tmp = path + ".tmp"
    with open(tmp, "wb") as f:
        f.write(b"".join(chunks))
    os.replace(tmp, path)


def load_checkpoint(path: str, expected_hash: str | None = None,
                    override_hash: bool = False):
    """Returns (arrays, stored_hash). Rejects version/hash mismatches and
    truncation, naming the offending tensor."""
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != MAGIC:
        raise CheckpointFormatError(f"{path}: bad magic {blob[:4]!r}")
    if len(blob) < 12:
        raise CheckpointFormatError(f"{path}: truncated header")
    version, count = struct.unpack("<II", blob[4:12])
    if version != FORMAT_VERSION:
        raise CheckpointFormatError(f"{path}: format version {version} != {FORMAT_VERSION}")
    off = 12
    arrays: dict[str, np.ndarray] = {}
    for _ in range(count):
        name = "<unreadable>"
        try:
            (nlen,) = struct.unpack_from("<H", blob, off)
            off += 2
            name = blob[off:off + nlen].decode()
            off += nlen
            tag, rank = struct.unpack_from("<BB", blob, off)
            off += 2
            shape = struct.unpack_from(f"<{rank}I", blob, off) if rank else ()
            off += 4 * rank
            if tag not in _TAG_DTYPES:
                raise CheckpointFormatError(f"{path}: unknown dtype tag {tag} for tensor '{name}'")
            dt = _TAG_DTYPES[tag]
            nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize if rank else dt.itemsize
            payload = blob[off:off + nbytes]
            if len(payload) != nbytes:
                raise CheckpointFormatError(
                    f"{path}: truncated payload for tensor '{name}' "
                    f"(need {nbytes} bytes, found {len(payload)})")
            arrays[name] = np.frombuffer(payload, dtype=dt).reshape(shape).copy()
            off += nbytes
        except struct.error as e:
            raise CheckpointFormatError(f"{path}: truncated while reading tensor '{name}': {e}")
    try:
        (hlen,) = struct.unpack_from("<H", blob, off)
        off += 2
        stored_hash = blob[off:off + hlen].decode()
        if len(blob[off:off + hlen]) != hlen:
            raise CheckpointFormatError(f"{path}: truncated footer")
    except struct.error:
        raise CheckpointFormatError(f"{path}: missing config-hash footer")
    if expected_hash is not None and stored_hash != expected_hash and not override_hash:
        raise ConfigHashMismatch(
            f"{path}: checkpoint config hash {stored_hash[:12]}... does not match "
            f"the active config {expected_hash[:12]}... (pass override to force)")
    return arrays, stored_hash
