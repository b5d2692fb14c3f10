"""Embedding store files: a fixed binary layout plus an id sidecar.

Layout (little-endian): 20-byte header `REMB | version u32 | dim u32 |
count u64`, then count*dim float32 rows in row-major order. Ids live in
a `.ids` text file next to the store, one per line, same order as the
rows. The training side reads exactly this layout, so the writer here
validates everything the reader over there would reject: shape, id
hygiene, finiteness.

Writes go through a temp file in the destination directory followed by
os.replace, so a crashed export never leaves a half-written store. The
sidecar lands before the blob: a visible `.emb` implies a complete pair.
"""

import os
import struct
import tempfile
from collections import Counter
from pathlib import Path

import numpy as np

STORE_MAGIC = b"REMB"
STORE_VERSION = 1
_HEADER = struct.Struct("<4sIIQ")  # magic, version, dim, count


class ExportError(RuntimeError):
    """Any condition that makes the requested export impossible."""


def ids_path(path) -> Path:
    return Path(path).with_suffix(".ids")


def _atomic_write(path: Path, blob: bytes) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(blob)
        os.replace(tmp, path)
    except BaseException:
        os.unlink(tmp)
        raise


def write_store(path, ids, rows: np.ndarray) -> None:
    """Write rows (cast to float32) and the id sidecar atomically."""
    path = Path(path)
    rows = np.ascontiguousarray(rows, dtype="<f4")
    if rows.ndim != 2:
        raise ExportError(f"rows must be 2-D, got shape {rows.shape}")
    ids = [str(i) for i in ids]
    if len(ids) != rows.shape[0]:
        raise ExportError(f"{len(ids)} ids for {rows.shape[0]} rows")
    if any("\n" in i or not i for i in ids):
        raise ExportError("ids must be non-empty and newline-free")
    if len(set(ids)) != len(ids):
        counts = Counter(ids)
        dupes = sorted(i for i, c in counts.items() if c > 1)
        raise ExportError(f"duplicate ids: {dupes[:8]}")
    if rows.size and not np.isfinite(rows).all():
        bad = np.nonzero(~np.isfinite(rows).all(axis=1))[0]
        raise ExportError(
            f"non-finite rows for ids {[ids[k] for k in bad[:8].tolist()]}")
    header = _HEADER.pack(STORE_MAGIC, STORE_VERSION,
                          rows.shape[1], rows.shape[0])
    _atomic_write(ids_path(path),
                  "".join(i + "\n" for i in ids).encode("utf-8"))
    _atomic_write(path, header + rows.tobytes())


def read_store(path):
    """Read a store back as (ids, rows). Self-check use only; the
    training side has the authoritative loader."""
    path = Path(path)
    blob = path.read_bytes()
    if len(blob) < _HEADER.size:
        raise ExportError(f"{path}: truncated header")
    magic, version, dim, count = _HEADER.unpack_from(blob)
    if magic != STORE_MAGIC or version != STORE_VERSION:
        raise ExportError(f"{path}: bad magic/version {magic!r}/{version}")
    want = _HEADER.size + 4 * dim * count
    if len(blob) != want:
        raise ExportError(f"{path}: expected {want} bytes, found {len(blob)}")
    rows = np.frombuffer(blob, dtype="<f4",
                         offset=_HEADER.size).reshape(count, dim)
    ids = ids_path(path).read_text(encoding="utf-8").splitlines()
    if len(ids) != count:
        raise ExportError(f"{ids_path(path)}: {len(ids)} ids for {count} rows")
    return ids, rows


def read_ids(path) -> list:
    """Just the id sidecar, for reference checks without loading rows."""
    return ids_path(path).read_text(encoding="utf-8").splitlines()
