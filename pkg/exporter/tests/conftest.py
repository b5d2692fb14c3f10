"""Shared fixture: a ten-image, ten-caption retrieval dataset on disk.

Images are seeded random PNGs of varied sizes, some nested under
category directories so relative-path ids get exercised. The listing
pairs each image with its neighbor and carries two captions per row.
"""

import json
from pathlib import Path

import numpy as np
import pytest
from PIL import Image

CATEGORIES = ("Dress", "Shirt", "Toptee")


def _write_images(root: Path, rng) -> list:
    names = []
    for i in range(10):
        sub = "" if i % 3 == 0 else f"{CATEGORIES[i % 3].lower()}/"
        name = f"{sub}item-{i:02d}.png"
        path = root / name
        path.parent.mkdir(parents=True, exist_ok=True)
        h = int(rng.integers(24, 56))
        w = int(rng.integers(24, 56))
        pixels = rng.integers(0, 256, size=(h, w, 3), dtype=np.uint8)
        Image.fromarray(pixels).save(path)
        names.append(name)
    return names


def _write_listing(path: Path, names: list) -> list:
    rows = []
    for i in range(10):
        rows.append({
            "candidate": names[i],
            "target": names[(i + 1) % 10],
            "captions": [f"is more like item {i}", f"has pattern {i % 4}"],
            "category": CATEGORIES[i % 3],
        })
    path.write_text(json.dumps(rows, indent=2), encoding="utf-8")
    return rows


@pytest.fixture(scope="session")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("dataset")
    images = root / "images"
    images.mkdir()
    names = _write_images(images, np.random.default_rng(11))
    listing_rows = _write_listing(root / "listing.json", names)
    return {"root": root, "images": images, "names": names,
            "listing": root / "listing.json", "listing_rows": listing_rows}
