"""Batch export of image and caption features to embedding stores.

Ids are dataset-relative posix paths for images and caption-table keys
for texts, never absolute paths, so stores stay portable across
machines. Row order follows sorted ids, which together with the seeded
encoders makes re-exports byte-identical.
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from .encoders import get_encoder
from .stores import ExportError, write_store

log = logging.getLogger("feature_exporter")

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp", ".webp")


@dataclass
class ExportJob:
    """One export run: where the inputs live and how to encode them."""

    encoder: str
    out_path: Path
    image_dir: Path | None = None
    captions: dict | None = None      # id -> caption text
    batch_size: int = 64
    device: str = "cpu"               # hint for encoders that can use one

    def __post_init__(self):
        self.out_path = Path(self.out_path)
        if self.image_dir is not None:
            self.image_dir = Path(self.image_dir)
        if self.batch_size < 1:
            raise ExportError(f"batch_size must be >= 1, got {self.batch_size}")


@dataclass
class ExportReport:
    count: int
    dim: int
    skipped: list = field(default_factory=list)


def list_images(root: Path) -> list:
    """Relative posix paths of every image file under root, sorted."""
    root = Path(root)
    if not root.is_dir():
        raise ExportError(f"image directory {root} does not exist")
    found = [p.relative_to(root).as_posix()
             for p in root.rglob("*")
             if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES]
    return sorted(found)


def _batches(items, size):
    for k in range(0, len(items), size):
        yield items[k:k + size]


def export_images(job: ExportJob, strict: bool = False) -> ExportReport:
    """Encode every image under job.image_dir into job.out_path.

    Undecodable files are skipped with a logged id unless strict, which
    aborts on the first one. The store is written only after the full
    pass, so a failed run leaves no partial output.
    """
    if job.image_dir is None:
        raise ExportError("export_images needs an image directory")
    encoder = get_encoder(job.encoder)
    ids = list_images(job.image_dir)
    kept, rows, skipped = [], [], []
    for chunk in _batches(ids, job.batch_size):
        images, ok = [], []
        for rid in chunk:
            try:
                with Image.open(job.image_dir / rid) as im:
                    im.load()
                    images.append(im.copy())
                ok.append(rid)
            except (OSError, UnidentifiedImageError, ValueError) as e:
                if strict:
                    raise ExportError(f"undecodable image {rid}: {e}") from e
                log.warning("skipping undecodable image %s: %s", rid, e)
                skipped.append(rid)
        if images:
            rows.append(encoder.encode_images(images))
            kept.extend(ok)
    stacked = (np.concatenate(rows, axis=0) if rows
               else np.zeros((0, encoder.width)))
    write_store(job.out_path, kept, stacked)
    return ExportReport(count=len(kept), dim=encoder.width, skipped=skipped)


def export_texts(job: ExportJob) -> ExportReport:
    """Encode every caption in job.captions into job.out_path.

    Empty captions are legal: they encode to the empty string's own
    representation, with a warning so silent data loss upstream shows up.
    """
    if job.captions is None:
        raise ExportError("export_texts needs a caption table")
    encoder = get_encoder(job.encoder)
    ids = sorted(job.captions)
    for rid in ids:
        if not job.captions[rid]:
            log.warning("empty caption for id %s", rid)
    rows = [encoder.encode_texts([job.captions[rid] for rid in chunk])
            for chunk in _batches(ids, job.batch_size)]
    stacked = (np.concatenate(rows, axis=0) if rows
               else np.zeros((0, encoder.width)))
    write_store(job.out_path, ids, stacked)
    return ExportReport(count=len(ids), dim=encoder.width)
