"""Triplet manifests from raw dataset listings.

A listing is a JSON array of rows in the common retrieval-benchmark
shapes. Per row the builder looks for:

  source image : "candidate" | "reference" | "source_image"
  target image : "target" | "target_hard" | "target_image"
  text         : "captions" (list, joined) | "caption" (string)
  category     : "category", else the run-wide default
  subset       : "subset" | "img_set": {"members": [...]}

Multi-caption rows are joined into one query text with a separator
(default " and ", flag-overridable); that joined string is what gets a
text id and an embedding row. Text ids are content hashes of
(source, target, joined text), so rebuilding a reordered listing yields
the same table.

Output rows use the store-consumer schema: source_image_id,
source_text_id, target_image_id, optional category and subset_ids, one
JSON object per line with sorted keys.
"""

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

from .stores import ExportError, _atomic_write

DEFAULT_SEPARATOR = " and "

_SOURCE_KEYS = ("candidate", "reference", "source_image")
_TARGET_KEYS = ("target", "target_hard", "target_image")


@dataclass
class ManifestResult:
    records: list       # dicts in output schema, listing order
    captions: dict      # text id -> joined caption


def _pick(row: dict, keys: tuple, what: str, lineno: int) -> str:
    for k in keys:
        if k in row:
            value = row[k]
            if not isinstance(value, str) or not value:
                raise ExportError(
                    f"listing row {lineno}: {k} must be a non-empty string")
            return value
    raise ExportError(
        f"listing row {lineno}: no {what} field (one of {', '.join(keys)})")


def _caption(row: dict, separator: str, lineno: int) -> str:
    if "captions" in row:
        parts = row["captions"]
        if (not isinstance(parts, list)
                or not all(isinstance(p, str) for p in parts)):
            raise ExportError(
                f"listing row {lineno}: captions must be a list of strings")
        return separator.join(parts)
    if "caption" in row:
        if not isinstance(row["caption"], str):
            raise ExportError(f"listing row {lineno}: caption must be a string")
        return row["caption"]
    raise ExportError(
        f"listing row {lineno}: no caption field (captions or caption)")


def _subset(row: dict, lineno: int):
    members = row.get("subset")
    if members is None and isinstance(row.get("img_set"), dict):
        members = row["img_set"].get("members")
    if members is None:
        return None
    if (not isinstance(members, list)
            or not all(isinstance(m, str) for m in members)):
        raise ExportError(
            f"listing row {lineno}: subset must be a list of string ids")
    return members


def _text_id(source: str, target: str, text: str) -> str:
    digest = hashlib.sha256(
        b"\x00".join(p.encode("utf-8") for p in (source, target, text)))
    return "cap-" + digest.hexdigest()[:16]


def build_manifest(listing, separator: str = DEFAULT_SEPARATOR,
                   category: str | None = None) -> ManifestResult:
    """Turn listing rows into manifest records plus their caption table."""
    records, captions, seen = [], {}, set()
    for lineno, row in enumerate(listing):
        if not isinstance(row, dict):
            raise ExportError(f"listing row {lineno}: expected an object")
        source = _pick(row, _SOURCE_KEYS, "source image", lineno)
        target = _pick(row, _TARGET_KEYS, "target image", lineno)
        text = _caption(row, separator, lineno)
        tid = _text_id(source, target, text)
        key = (source, tid, target)
        if key in seen:
            raise ExportError(
                f"listing row {lineno}: duplicate triplet {key}")
        seen.add(key)
        captions[tid] = text
        rec = {"source_image_id": source,
               "source_text_id": tid,
               "target_image_id": target}
        cat = row.get("category", category)
        if cat is not None:
            rec["category"] = cat
        subset = _subset(row, lineno)
        if subset is not None:
            rec["subset_ids"] = subset
        records.append(rec)
    return ManifestResult(records=records, captions=captions)


def check_references(records, image_ids, target_ids=None) -> None:
    """Every referenced image id must exist; all misses reported at once.

    Targets fall back to the image id set, matching how consumers key
    target galleries by image id unless a separate store is given.
    """
    image_ids = set(image_ids)
    target_ids = image_ids if target_ids is None else set(target_ids)
    dangling = []
    for k, rec in enumerate(records):
        if rec["source_image_id"] not in image_ids:
            dangling.append((k, "image", rec["source_image_id"]))
        if rec["target_image_id"] not in target_ids:
            dangling.append((k, "target", rec["target_image_id"]))
        for sid in rec.get("subset_ids") or []:
            if sid not in target_ids:
                dangling.append((k, "subset", sid))
    if dangling:
        listing = ", ".join(f"row {k} {kind}:{rid!r}"
                            for k, kind, rid in dangling)
        raise ExportError(f"dangling references: {listing}")


def write_manifest(path, records) -> None:
    lines = "".join(json.dumps(r, sort_keys=True) + "\n" for r in records)
    _atomic_write(Path(path), lines.encode("utf-8"))


def write_captions(path, captions: dict) -> None:
    blob = json.dumps(captions, sort_keys=True, indent=2) + "\n"
    _atomic_write(Path(path), blob.encode("utf-8"))


def load_captions(path) -> dict:
    table = json.loads(Path(path).read_text(encoding="utf-8"))
    if (not isinstance(table, dict)
            or not all(isinstance(v, str) for v in table.values())):
        raise ExportError(f"{path}: caption table must map id -> string")
    return table
