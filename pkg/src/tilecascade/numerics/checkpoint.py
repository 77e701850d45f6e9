"""Checkpoint file format.

Layout (all integers little-endian u32, all floats little-endian IEEE f64):

    magic   4 bytes  b"URCK"
    version u32      currently 1
    count   u32      number of entries
    entry*  count times:
        name_len u32
        name     UTF-8 bytes
        rank     u32
        extents  rank * u32
        values   prod(extents) * f64, C order

Entries are written in sorted-name order, so saving the same arrays twice
yields identical bytes. There is no separate metadata section: callers that
need config/schedule alongside parameters store them as reserved entries
under the ``_meta/`` name prefix (each a small float64 array), which keeps
the byte format exactly as above.
"""

import struct

import numpy as np

from ..errors import CheckpointError, NumericError

MAGIC = b"URCK"
VERSION = 1
META_PREFIX = "_meta/"


def checkpoint_bytes(entries: dict[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(entries))]
    for name in sorted(entries):
        # np.asarray keeps rank 0 as rank 0 (ascontiguousarray would not)
        arr = np.asarray(entries[name], dtype=np.float64, order="C")
        if not np.all(np.isfinite(arr)):
            raise NumericError(f"non-finite values in checkpoint entry {name!r}")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.astype("<f8").tobytes(order="C"))
    return b"".join(parts)


def save_checkpoint(path, entries: dict[str, np.ndarray],
                    meta: dict[str, "float | int | list"] | None = None) -> None:
    """Write entries (plus optional _meta/ scalars or vectors) to path."""
    combined = dict(entries)
    for key, value in (meta or {}).items():
        name = META_PREFIX + key
        if name in combined:
            raise CheckpointError(f"duplicate checkpoint entry {name!r}")
        combined[name] = np.atleast_1d(np.asarray(value, dtype=np.float64))
    data = checkpoint_bytes(combined)
    with open(path, "wb") as fh:
        fh.write(data)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict[str, np.ndarray]]:
    """Read a checkpoint; returns (entries, meta) with _meta/ split out."""
    with open(path, "rb") as fh:
        data = fh.read()
    return parse_checkpoint(data)


def parse_checkpoint(data: bytes) -> tuple[dict[str, np.ndarray], dict[str, np.ndarray]]:
    view = memoryview(data)
    off = 0

    def take(n, what):
        nonlocal off
        if off + n > len(view):
            raise CheckpointError(f"truncated checkpoint while reading {what} "
                                  f"(need {n} bytes at offset {off}, have "
                                  f"{len(view) - off})")
        chunk = view[off:off + n]
        off += n
        return chunk

    if bytes(take(4, "magic")) != MAGIC:
        raise CheckpointError("bad magic bytes: not a checkpoint file")
    version, count = struct.unpack("<II", take(8, "header"))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    entries: dict[str, np.ndarray] = {}
    meta: dict[str, np.ndarray] = {}
    for k in range(count):
        (name_len,) = struct.unpack("<I", take(4, f"entry {k} name length"))
        try:
            name = bytes(take(name_len, f"entry {k} name")).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CheckpointError(f"entry {k} name is not valid UTF-8") from exc
        (rank,) = struct.unpack("<I", take(4, f"{name!r} rank"))
        if rank > 8:
            raise CheckpointError(f"{name!r} has implausible rank {rank}")
        extents = struct.unpack(f"<{rank}I", take(4 * rank, f"{name!r} extents"))
        n_values = int(np.prod(extents, dtype=np.int64)) if rank else 1
        raw = take(8 * n_values, f"{name!r} values")
        arr = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(extents)
        if name.startswith(META_PREFIX):
            key = name[len(META_PREFIX):]
            if key in meta:
                raise CheckpointError(f"duplicate entry {name!r}")
            meta[key] = arr
        else:
            if name in entries:
                raise CheckpointError(f"duplicate entry {name!r}")
            entries[name] = arr
    if off != len(view):
        raise CheckpointError(f"{len(view) - off} trailing bytes after last entry")
    return entries, meta
