"""Embedding stores, triplet manifests, and the synthetic benchmark generator.

Store layout (little-endian, fixed): 20-byte header `REMB | version u32 |
dim u32 | count u64`, then count*dim float32 rows. Ids live in a `.ids`
sidecar, one UTF-8 id per line, row-aligned. Manifests are JSON-lines with
one triplet record per line.
"""

from __future__ import annotations

import dataclasses
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

STORE_MAGIC = b"REMB"
STORE_VERSION = 1
_HEADER = struct.Struct("<4sIIQ")  # magic, version, dim, count


class StoreError(ValueError):
    """Malformed or inconsistent embedding store; ``kind`` tags the failure."""

    def __init__(self, kind: str, message: str):
        super().__init__(message)
        self.kind = kind


class ManifestError(ValueError):
    pass


def ids_path(path) -> Path:
    return Path(path).with_suffix(".ids")


def save_store(path, ids, rows: np.ndarray) -> None:
    """Write a store plus its id sidecar; rows are cast to float32."""
    path = Path(path)
    rows = np.ascontiguousarray(rows, dtype="<f4")
    if rows.ndim != 2:
        raise StoreError("shape", f"rows must be 2-D, got shape {rows.shape}")
    ids = [str(i) for i in ids]
    if len(ids) != rows.shape[0]:
        raise StoreError("count", f"{len(ids)} ids for {rows.shape[0]} rows")
    if any("\n" in i or not i for i in ids):
        raise StoreError("id", "ids must be non-empty and newline-free")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(STORE_MAGIC, STORE_VERSION,
                              rows.shape[1], rows.shape[0]))
        fh.write(rows.tobytes())
    ids_path(path).write_text("".join(i + "\n" for i in ids), encoding="utf-8")


@dataclass
class EmbeddingStore:
    ids: list
    rows: np.ndarray  # (count, dim) float32

    def __post_init__(self):
        self.index = {i: k for k, i in enumerate(self.ids)}

    @property
    def dim(self) -> int:
        return self.rows.shape[1]

    @property
    def count(self) -> int:
        return self.rows.shape[0]

    def row(self, rid: str) -> np.ndarray:
        return self.rows[self.index[rid]]

    def __contains__(self, rid: str) -> bool:
        return rid in self.index


def load_store(path) -> EmbeddingStore:
    """Read and fully validate a store; every failure mode is distinct."""
    path = Path(path)
    blob = path.read_bytes()
    if len(blob) < _HEADER.size:
        raise StoreError("truncated",
                         f"{path}: {len(blob)} bytes, header needs {_HEADER.size}")
    magic, version, dim, count = _HEADER.unpack_from(blob)
    if magic != STORE_MAGIC:
        raise StoreError("magic", f"{path}: bad magic {magic!r}")
    if version != STORE_VERSION:
        raise StoreError("version",
                         f"{path}: version {version}, expected {STORE_VERSION}")
    if dim < 1:
        raise StoreError("dim", f"{path}: dim must be >= 1, got {dim}")
    want = _HEADER.size + 4 * dim * count
    if len(blob) != want:
        raise StoreError("truncated",
                         f"{path}: expected {want} bytes, found {len(blob)}")
    rows = np.frombuffer(blob, dtype="<f4", offset=_HEADER.size).reshape(count, dim)
    sidecar = ids_path(path)
    if not sidecar.exists():
        raise StoreError("ids", f"missing id sidecar {sidecar}")
    ids = sidecar.read_text(encoding="utf-8").splitlines()
    if len(ids) != count:
        raise StoreError("count",
                         f"{sidecar}: {len(ids)} ids for {count} rows")
    seen = set()
    for i in ids:
        if i in seen:
            raise StoreError("duplicate_id", f"{sidecar}: duplicate id {i!r}")
        seen.add(i)
    bad = np.nonzero(~np.isfinite(rows).all(axis=1))[0]
    if bad.size:
        raise StoreError("nan",
                         f"{path}: non-finite row(s) "
                         f"{[ids[k] for k in bad[:8].tolist()]}")
    return EmbeddingStore(ids, rows)


# -- manifests ---------------------------------------------------------------


@dataclass
class TripletRecord:
    source_image_id: str
    source_text_id: str
    target_image_id: str
    category: str | None = None
    subset_ids: list | None = None

    def key(self) -> tuple:
        return (self.source_image_id, self.source_text_id, self.target_image_id)


def save_manifest(path, records) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            row = {k: v for k, v in dataclasses.asdict(r).items() if v is not None}
            fh.write(json.dumps(row, sort_keys=True) + "\n")


def load_manifest(path) -> list:
    """Parse a JSON-lines manifest; duplicates within the file are rejected."""
    records = []
    seen = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as e:
                raise ManifestError(f"{path}:{lineno}: invalid JSON ({e})") from e
            try:
                rec = TripletRecord(
                    source_image_id=row["source_image_id"],
                    source_text_id=row["source_text_id"],
                    target_image_id=row["target_image_id"],
                    category=row.get("category"),
                    subset_ids=row.get("subset_ids"))
            except KeyError as e:
                raise ManifestError(f"{path}:{lineno}: missing field {e}") from e
            if rec.key() in seen:
                raise ManifestError(f"{path}:{lineno}: duplicate record {rec.key()}")
            seen.add(rec.key())
            records.append(rec)
    return records


@dataclass
class ResolvedDataset:
    """Manifest rows joined against their stores, ready for batching."""

    records: list
    img: np.ndarray  # (N, d_img)
    txt: np.ndarray  # (N, d_txt)
    tgt: np.ndarray  # (N, d_tgt)

    def __len__(self) -> int:
        return len(self.records)

    def by_category(self) -> dict:
        groups: dict[str, list[int]] = {}
        for i, r in enumerate(self.records):
            groups.setdefault(r.category or "default", []).append(i)
        return {
            cat: ResolvedDataset([self.records[i] for i in idx],
                                 self.img[idx], self.txt[idx], self.tgt[idx])
            for cat, idx in groups.items()
        }


def resolve_triplets(records, img_store: EmbeddingStore,
                     txt_store: EmbeddingStore,
                     target_store: EmbeddingStore | None = None) -> ResolvedDataset:
    """Join every record's three ids to rows; unresolved ids all reported.

    Targets default to the image store (real datasets key targets by image
    id); a separate target store overrides that.
    """
    tgt_store = target_store if target_store is not None else img_store
    missing = []
    for r in records:
        if r.source_image_id not in img_store:
            missing.append(("image", r.source_image_id))
        if r.source_text_id not in txt_store:
            missing.append(("text", r.source_text_id))
        if r.target_image_id not in tgt_store:
            missing.append(("target", r.target_image_id))
    if missing:
        listing = ", ".join(f"{kind}:{rid!r}" for kind, rid in missing)
        raise ManifestError(f"unresolved ids: {listing}")
    n = len(records)
    img = np.stack([img_store.row(r.source_image_id) for r in records]) \
        if n else np.zeros((0, img_store.dim), dtype=np.float32)
    txt = np.stack([txt_store.row(r.source_text_id) for r in records]) \
        if n else np.zeros((0, txt_store.dim), dtype=np.float32)
    tgt = np.stack([tgt_store.row(r.target_image_id) for r in records]) \
        if n else np.zeros((0, tgt_store.dim), dtype=np.float32)
    return ResolvedDataset(list(records), img, txt, tgt)


# -- synthetic benchmark ------------------------------------------------------


@dataclass
class SynthSpec:
    """Planted many-to-many retrieval world.

    Each cluster anchor a is split `sources_per_target` ways into exact pairs
    u + v = a, and surrounded by `targets_per_source` near-duplicate targets.
    Every (pair, target) combination appears as a triplet, so one target is
    reachable from several queries and one query matches several targets.
    """

    dim: int = 64
    num_clusters: int = 32
    sources_per_target: int = 4
    targets_per_source: int = 2
    noise_sigma: float = 0.05
    seed: int = 7
    train_rows: int = 2048
    val_rows: int = 512

    def __post_init__(self):
        for name in ("dim", "num_clusters", "sources_per_target",
                     "targets_per_source", "train_rows", "val_rows"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        combos = self.num_clusters * self.sources_per_target * self.targets_per_source
        for name in ("train_rows", "val_rows"):
            if getattr(self, name) % combos:
                raise ValueError(
                    f"{name} must be a multiple of the {combos} "
                    f"(cluster, pair, twin) combinations")


@dataclass
class SynthBundle:
    images: EmbeddingStore
    texts: EmbeddingStore
    targets: EmbeddingStore
    train_records: list
    val_records: list
    truth: dict


def _unit_rows(rng: np.random.Generator, n: int, d: int) -> np.ndarray:
    x = rng.standard_normal((n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def generate_synthetic(spec: SynthSpec) -> SynthBundle:
    """Deterministic world build; same spec gives identical bytes."""
    rng = np.random.default_rng(spec.seed)
    c, p, t, d = (spec.num_clusters, spec.sources_per_target,
                  spec.targets_per_source, spec.dim)
    anchors = _unit_rows(rng, c, d)
    gram = anchors @ anchors.T
    np.fill_diagonal(gram, 0.0)
    worst = float(np.abs(gram).max())
    if worst > 0.5:
        raise ValueError(
            f"clusters not separable in dim {d}: max pairwise cosine "
            f"{worst:.3f} > 0.5; raise dim or lower num_clusters")
    # exact decompositions u + v = anchor, one per source pair
    w = _unit_rows(rng, c * p, d).reshape(c, p, d)
    u = (anchors[:, None, :] + w) / 2.0
    v = (anchors[:, None, :] - w) / 2.0
    # twin targets per cluster: near-duplicates of the anchor
    tgt_rows = (anchors[:, None, :]
                + spec.noise_sigma * rng.standard_normal((c, t, d)) / np.sqrt(d))
    tgt_ids = [f"tgt-c{ci:03d}-k{ki}" for ci in range(c) for ki in range(t)]
    targets = EmbeddingStore(tgt_ids, tgt_rows.reshape(c * t, d).astype(np.float32))

    combos = [(ci, pi, ki) for ci in range(c) for pi in range(p) for ki in range(t)]

    def build_split(tag: str, rows: int):
        copies = rows // len(combos)
        order = combos * copies
        rng.shuffle(order)
        img_rows = np.empty((rows, d), dtype=np.float64)
        txt_rows = np.empty((rows, d), dtype=np.float64)
        img_ids, txt_ids, records, truth_rows = [], [], [], []
        for i, (ci, pi, ki) in enumerate(order):
            noise = spec.noise_sigma * rng.standard_normal((2, d)) / np.sqrt(d)
            img_rows[i] = u[ci, pi] + noise[0]
            txt_rows[i] = v[ci, pi] + noise[1]
            iid, xid = f"img-{tag}-{i:05d}", f"txt-{tag}-{i:05d}"
            img_ids.append(iid)
            txt_ids.append(xid)
            records.append(TripletRecord(iid, xid, f"tgt-c{ci:03d}-k{ki}"))
            truth_rows.append({
                "source_image_id": iid,
                "cluster": ci,
                "source_pair": pi,
                "target_id": f"tgt-c{ci:03d}-k{ki}",
                "acceptable_ids": [f"tgt-c{ci:03d}-k{kk}" for kk in range(t)],
            })
        return img_ids, img_rows, txt_ids, txt_rows, records, truth_rows

    tr = build_split("train", spec.train_rows)
    va = build_split("val", spec.val_rows)
    images = EmbeddingStore(tr[0] + va[0],
                            np.vstack([tr[1], va[1]]).astype(np.float32))
    texts = EmbeddingStore(tr[2] + va[2],
                           np.vstack([tr[3], va[3]]).astype(np.float32))
    truth = {
        "spec": dataclasses.asdict(spec),
        "train": tr[5],
        "val": va[5],
    }
    return SynthBundle(images, texts, targets, tr[4], va[4], truth)


def write_synthetic(bundle: SynthBundle, outdir) -> dict:
    """Persist a bundle; returns the path map."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    paths = {
        "images": outdir / "images.emb",
        "texts": outdir / "texts.emb",
        "targets": outdir / "targets.emb",
        "train": outdir / "train.jsonl",
        "val": outdir / "val.jsonl",
        "truth": outdir / "truth.json",
    }
    save_store(paths["images"], bundle.images.ids, bundle.images.rows)
    save_store(paths["texts"], bundle.texts.ids, bundle.texts.rows)
    save_store(paths["targets"], bundle.targets.ids, bundle.targets.rows)
    save_manifest(paths["train"], bundle.train_records)
    save_manifest(paths["val"], bundle.val_records)
    paths["truth"].write_text(json.dumps(bundle.truth, indent=1), encoding="utf-8")
    return {k: str(v) for k, v in paths.items()}
