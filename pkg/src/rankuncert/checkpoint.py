"""Versioned binary checkpoint container.

Layout (little-endian): `RUNC | version u32 | config sha256 (32 bytes) |
epoch u32 | step u64 | n_tensors u32`, then per tensor: name length u16,
UTF-8 name, ndim u8, shape u32 per axis, float32 payload. Tensors are
written in sorted name order, so identical state always serializes to
identical bytes. Parameter names carry a `p/` prefix; optimizer first and
second moments use `m/` and `v/`.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

CKPT_MAGIC = b"RUNC"
CKPT_VERSION = 1
_HEADER = struct.Struct("<4sI32sIQI")


class CheckpointError(ValueError):
    def __init__(self, kind: str, message: str):
        super().__init__(message)
        self.kind = kind


@dataclass
class CheckpointData:
    params: dict
    m: dict
    v: dict
    epoch: int
    step: int
    config_digest: bytes

    def named_tensors(self) -> dict:
        out = {}
        for prefix, group in (("p/", self.params), ("m/", self.m), ("v/", self.v)):
            for name, arr in group.items():
                out[prefix + name] = arr
        return out


def save_checkpoint(path, ckpt: CheckpointData) -> None:
    if len(ckpt.config_digest) != 32:
        raise CheckpointError("digest", "config digest must be 32 bytes")
    tensors = ckpt.named_tensors()
    chunks = [_HEADER.pack(CKPT_MAGIC, CKPT_VERSION, ckpt.config_digest,
                           ckpt.epoch, ckpt.step, len(tensors))]
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f4")
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<B", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))


def load_checkpoint(path) -> CheckpointData:
    blob = open(path, "rb").read()
    if len(blob) < _HEADER.size:
        raise CheckpointError("truncated",
                              f"{path}: {len(blob)} bytes, header needs "
                              f"{_HEADER.size}")
    magic, version, digest, epoch, step, n = _HEADER.unpack_from(blob)
    if magic != CKPT_MAGIC:
        raise CheckpointError("magic", f"{path}: bad magic {magic!r}")
    if version != CKPT_VERSION:
        raise CheckpointError("version",
                              f"{path}: version {version}, expected "
                              f"{CKPT_VERSION}")
    off = _HEADER.size
    groups: dict[str, dict] = {"p/": {}, "m/": {}, "v/": {}}
    for _ in range(n):
        try:
            (name_len,) = struct.unpack_from("<H", blob, off)
            off += 2
            name = blob[off:off + name_len].decode("utf-8")
            off += name_len
            (ndim,) = struct.unpack_from("<B", blob, off)
            off += 1
            shape = struct.unpack_from(f"<{ndim}I", blob, off)
            off += 4 * ndim
            size = int(np.prod(shape, dtype=np.int64)) if ndim else 1
            payload = blob[off:off + 4 * size]
            if len(payload) != 4 * size:
                raise CheckpointError(
                    "truncated",
                    f"{path}: tensor {name!r} needs {4 * size} bytes at "
                    f"offset {off}, found {len(payload)}")
            off += 4 * size
        except struct.error as e:
            raise CheckpointError("truncated",
                                  f"{path}: header parse failed at offset "
                                  f"{off}: {e}") from e
        arr = np.frombuffer(payload, dtype="<f4").reshape(shape)
        prefix = name[:2]
        if prefix not in groups:
            raise CheckpointError("name", f"{path}: unknown tensor group "
                                          f"in {name!r}")
        groups[prefix][name[2:]] = arr.copy()
    if off != len(blob):
        raise CheckpointError("trailing",
                              f"{path}: {len(blob) - off} unread trailing bytes")
    return CheckpointData(groups["p/"], groups["m/"], groups["v/"],
                          epoch, step, digest)
