"""Encoder registry for the export pipeline.

An encoder maps a batch of PIL images or caption strings to a fixed-width
float matrix. Two towers, one width: image and text rows from the same
encoder tag always share a dimension, which downstream fusion relies on.

The default `hashed-<width>` encoder is a fully offline featurizer:
seeded random projections over raw pixels and byte trigrams. It exists
so the pipeline (decode, batch, write, manifest) can run and be tested
bit-for-bit deterministically on machines with no model weights. It is
not a learned representation; swap in a pretrained tag for real
extraction quality. Determinism contract: same tag, same inputs, same
bytes out, across processes and platforms.
"""

import hashlib
import zlib
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from .stores import ExportError

_IMAGE_SIDE = 32          # decode target: 32x32 RGB
_TEXT_BUCKETS = 4096      # trigram hash space
_TEXT_FRAME = (b"\x02\x02", b"\x03\x03")  # >= 2 trigrams even for ""


def _tag_seed(tag: str) -> int:
    return int.from_bytes(hashlib.sha256(tag.encode()).digest()[:8], "little")


@dataclass
class HashedProjectionEncoder:
    """Deterministic offline featurizer: pixels / byte trigrams through
    fixed Gaussian projections, L2-normalized."""

    tag: str
    width: int
    _img_proj: np.ndarray = field(init=False, repr=False, default=None)
    _txt_proj: np.ndarray = field(init=False, repr=False, default=None)

    def _proj(self, which: int, in_dim: int) -> np.ndarray:
        rng = np.random.default_rng(
            np.random.SeedSequence([_tag_seed(self.tag), which]))
        return rng.standard_normal((in_dim, self.width)) / np.sqrt(in_dim)

    @staticmethod
    def _normalize(rows: np.ndarray) -> np.ndarray:
        norms = np.linalg.norm(rows, axis=1, keepdims=True)
        norms[norms < 1e-12] = 1.0
        return rows / norms

    def encode_images(self, images) -> np.ndarray:
        if self._img_proj is None:
            # +1 bias input so a constant-black frame still lands off origin
            self._img_proj = self._proj(0, 3 * _IMAGE_SIDE * _IMAGE_SIDE + 1)
        flat = np.empty((len(images), self._img_proj.shape[0]))
        for k, im in enumerate(images):
            im = im.convert("RGB").resize((_IMAGE_SIDE, _IMAGE_SIDE),
                                          Image.BILINEAR)
            px = np.asarray(im, dtype=np.float64).ravel() / 255.0
            flat[k, :-1] = px - 0.5
            flat[k, -1] = 1.0
        return self._normalize(flat @ self._img_proj)

    def encode_texts(self, texts) -> np.ndarray:
        if self._txt_proj is None:
            self._txt_proj = self._proj(1, _TEXT_BUCKETS)
        counts = np.zeros((len(texts), _TEXT_BUCKETS))
        for k, text in enumerate(texts):
            raw = _TEXT_FRAME[0] + text.encode("utf-8") + _TEXT_FRAME[1]
            for j in range(len(raw) - 2):
                counts[k, zlib.crc32(raw[j:j + 3]) % _TEXT_BUCKETS] += 1.0
        counts = self._normalize(counts)
        return self._normalize(counts @ self._txt_proj)


def _build_hashed(tag: str, width_part: str):
    try:
        width = int(width_part)
    except ValueError:
        raise ExportError(f"encoder {tag!r}: width must be an integer") from None
    if width < 1:
        raise ExportError(f"encoder {tag!r}: width must be >= 1")
    return HashedProjectionEncoder(tag=tag, width=width)


def _build_clip(tag: str, variant: str):
    raise ExportError(
        f"encoder {tag!r} needs pretrained weights and the optional clip "
        "dependencies, which this environment does not provide; use a "
        "hashed-<width> tag for offline pipeline runs")


_FAMILIES = {
    "hashed": _build_hashed,
    "clip": _build_clip,
}


def get_encoder(tag: str):
    """Resolve a tag like `hashed-64` to a constructed encoder."""
    family, _, rest = tag.partition("-")
    if family not in _FAMILIES:
        known = ", ".join(sorted(_FAMILIES))
        raise ExportError(f"unknown encoder {tag!r} (families: {known})")
    return _FAMILIES[family](tag, rest)
