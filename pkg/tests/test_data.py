"""Store format round-trips, manifest validation, synthetic world structure."""

import json

import numpy as np
import pytest

from rankuncert import data


def make_store(tmp_path, name="s.emb", n=5, d=3, seed=0):
    rng = np.random.default_rng(seed)
    ids = [f"row-{i}" for i in range(n)]
    rows = rng.normal(size=(n, d)).astype(np.float32)
    path = tmp_path / name
    data.save_store(path, ids, rows)
    return path, ids, rows


def test_store_round_trip_byte_identical(tmp_path):
    path, ids, rows = make_store(tmp_path)
    first = path.read_bytes()
    loaded = data.load_store(path)
    assert loaded.ids == ids
    np.testing.assert_array_equal(loaded.rows, rows)
    path2 = tmp_path / "again.emb"
    data.save_store(path2, loaded.ids, loaded.rows)
    assert path2.read_bytes() == first
    assert data.ids_path(path2).read_bytes() == data.ids_path(path).read_bytes()


def test_store_truncation_reports_lengths(tmp_path):
    path, _, _ = make_store(tmp_path)
    blob = path.read_bytes()
    path.write_bytes(blob[:-7])
    with pytest.raises(data.StoreError) as ei:
        data.load_store(path)
    assert ei.value.kind == "truncated"
    assert str(len(blob)) in str(ei.value)
    assert str(len(blob) - 7) in str(ei.value)


def test_store_bad_magic(tmp_path):
    path, _, _ = make_store(tmp_path)
    blob = bytearray(path.read_bytes())
    blob[:4] = b"XXXX"
    path.write_bytes(bytes(blob))
    with pytest.raises(data.StoreError) as ei:
        data.load_store(path)
    assert ei.value.kind == "magic"


def test_store_bad_version(tmp_path):
    path, _, _ = make_store(tmp_path)
    blob = bytearray(path.read_bytes())
    blob[4:8] = (99).to_bytes(4, "little")
    path.write_bytes(bytes(blob))
    with pytest.raises(data.StoreError) as ei:
        data.load_store(path)
    assert ei.value.kind == "version"


def test_store_nan_row_names_id(tmp_path):
    rng = np.random.default_rng(1)
    rows = rng.normal(size=(4, 3)).astype(np.float32)
    rows[2, 1] = np.nan
    path = tmp_path / "bad.emb"
    data.save_store(path, [f"r{i}" for i in range(4)], rows)
    with pytest.raises(data.StoreError) as ei:
        data.load_store(path)
    assert ei.value.kind == "nan"
    assert "r2" in str(ei.value)


def test_store_duplicate_ids_rejected(tmp_path):
    path, ids, rows = make_store(tmp_path)
    data.ids_path(path).write_text("a\nb\na\nb\na\n")
    with pytest.raises(data.StoreError) as ei:
        data.load_store(path)
    assert ei.value.kind == "duplicate_id"


def test_store_id_count_mismatch(tmp_path):
    path, _, _ = make_store(tmp_path)
    data.ids_path(path).write_text("only-one\n")
    with pytest.raises(data.StoreError) as ei:
        data.load_store(path)
    assert ei.value.kind == "count"


# -- manifests ---------------------------------------------------------------


def test_manifest_round_trip(tmp_path):
    recs = [
        data.TripletRecord("i0", "t0", "g0", category="dress"),
        data.TripletRecord("i1", "t1", "g1", subset_ids=["g0", "g1", "g2"]),
    ]
    path = tmp_path / "m.jsonl"
    data.save_manifest(path, recs)
    back = data.load_manifest(path)
    assert back == recs


def test_manifest_duplicate_record_rejected(tmp_path):
    path = tmp_path / "m.jsonl"
    row = json.dumps({"source_image_id": "i", "source_text_id": "t",
                      "target_image_id": "g"})
    path.write_text(row + "\n" + row + "\n")
    with pytest.raises(data.ManifestError, match="duplicate"):
        data.load_manifest(path)


def test_manifest_missing_field_reports_line(tmp_path):
    path = tmp_path / "m.jsonl"
    path.write_text(json.dumps({"source_image_id": "i"}) + "\n")
    with pytest.raises(data.ManifestError, match=":1:"):
        data.load_manifest(path)


def test_resolve_empty_manifest(tmp_path):
    path, _, _ = make_store(tmp_path)
    store = data.load_store(path)
    ds = data.resolve_triplets([], store, store)
    assert len(ds) == 0
    assert ds.img.shape == (0, store.dim)


def test_resolve_dangling_id_named(tmp_path):
    path, ids, _ = make_store(tmp_path, n=100)
    store = data.load_store(path)
    recs = [data.TripletRecord(ids[i], ids[i], ids[i]) for i in range(99)]
    recs.append(data.TripletRecord(ids[99], "GHOST", ids[99]))
    with pytest.raises(data.ManifestError) as ei:
        data.resolve_triplets(recs, store, store)
    msg = str(ei.value)
    assert "GHOST" in msg
    assert msg.count("'row-") == 0  # only the dangling id is listed


def test_resolve_rows_align_and_categories_split(tmp_path):
    path, ids, rows = make_store(tmp_path, n=6)
    store = data.load_store(path)
    recs = [data.TripletRecord(ids[i], ids[(i + 1) % 6], ids[(i + 2) % 6],
                               category=("a" if i < 2 else "b"))
            for i in range(6)]
    ds = data.resolve_triplets(recs, store, store)
    np.testing.assert_array_equal(ds.img[0], rows[0])
    np.testing.assert_array_equal(ds.txt[0], rows[1])
    np.testing.assert_array_equal(ds.tgt[0], rows[2])
    groups = ds.by_category()
    assert sorted(groups) == ["a", "b"]
    assert len(groups["a"]) == 2 and len(groups["b"]) == 4


def test_resolve_separate_target_store(tmp_path):
    p1, ids1, rows1 = make_store(tmp_path, "a.emb", n=3, seed=2)
    p2, ids2, rows2 = make_store(tmp_path, "b.emb", n=3, seed=3)
    s1, s2 = data.load_store(p1), data.load_store(p2)
    recs = [data.TripletRecord(ids1[0], ids1[1], ids2[2])]
    ds = data.resolve_triplets(recs, s1, s1, target_store=s2)
    np.testing.assert_array_equal(ds.tgt[0], rows2[2])


# -- synthetic ----------------------------------------------------------------


def small_spec(**kw):
    base = dict(dim=16, num_clusters=4, sources_per_target=2,
                targets_per_source=2, noise_sigma=0.05, seed=11,
                train_rows=64, val_rows=16)
    base.update(kw)
    return data.SynthSpec(**base)


def test_synthetic_shapes_and_counts():
    spec = small_spec()
    b = data.generate_synthetic(spec)
    assert b.targets.count == spec.num_clusters * spec.targets_per_source
    assert b.images.count == spec.train_rows + spec.val_rows
    assert len(b.train_records) == spec.train_rows
    assert len(b.val_records) == spec.val_rows


def test_synthetic_decomposition_exact_at_zero_noise():
    b = data.generate_synthetic(small_spec(noise_sigma=0.0))
    ds = data.resolve_triplets(b.train_records, b.images, b.texts, b.targets)
    q = ds.img.astype(np.float64) + ds.txt.astype(np.float64)
    cos = (q * ds.tgt).sum(1) / (np.linalg.norm(q, axis=1)
                                 * np.linalg.norm(ds.tgt, axis=1))
    assert cos.min() > 1 - 1e-6  # exact up to float32 storage rounding


def test_synthetic_zero_noise_one_to_one_rank1_untrained():
    spec = small_spec(noise_sigma=0.0, sources_per_target=1,
                      targets_per_source=1, train_rows=4, val_rows=4)
    b = data.generate_synthetic(spec)
    ds = data.resolve_triplets(b.val_records, b.images, b.texts, b.targets)
    q = ds.img + ds.txt
    g = b.targets.rows
    sims = (q / np.linalg.norm(q, axis=1, keepdims=True)) @ \
        (g / np.linalg.norm(g, axis=1, keepdims=True)).T
    top = np.argmax(sims, axis=1)
    for i, r in enumerate(ds.records):
        assert b.targets.ids[top[i]] == r.target_image_id


def test_synthetic_many_to_many_sharing():
    spec = small_spec()
    b = data.generate_synthetic(spec)
    by_tgt = {}
    for r in b.train_records:
        by_tgt.setdefault(r.target_image_id, set()).add(r.source_image_id)
    # every target is reachable from multiple distinct sources
    assert all(len(srcs) > 1 for srcs in by_tgt.values())
    assert len(by_tgt) == b.targets.count


def test_synthetic_deterministic_bytes(tmp_path):
    spec = small_spec()
    d1, d2 = tmp_path / "a", tmp_path / "b"
    data.write_synthetic(data.generate_synthetic(spec), d1)
    data.write_synthetic(data.generate_synthetic(spec), d2)
    for name in ("images.emb", "texts.emb", "targets.emb",
                 "train.jsonl", "val.jsonl", "truth.json"):
        assert (d1 / name).read_bytes() == (d2 / name).read_bytes(), name


def test_synthetic_unseparable_clusters_rejected():
    with pytest.raises(ValueError, match="separable"):
        data.generate_synthetic(small_spec(dim=8, num_clusters=32,
                                           train_rows=128, val_rows=128))


def test_synthetic_written_files_validate(tmp_path):
    paths = data.write_synthetic(data.generate_synthetic(small_spec()), tmp_path)
    img = data.load_store(paths["images"])
    txt = data.load_store(paths["texts"])
    tgt = data.load_store(paths["targets"])
    recs = data.load_manifest(paths["train"])
    ds = data.resolve_triplets(recs, img, txt, target_store=tgt)
    assert len(ds) == 64
    truth = json.loads((tmp_path / "truth.json").read_text())
    assert len(truth["train"]) == 64


def test_synth_spec_validation():
    with pytest.raises(ValueError):
        small_spec(noise_sigma=-0.1)
    with pytest.raises(ValueError):
        small_spec(train_rows=63)  # not a multiple of the combo count
    with pytest.raises(ValueError):
        small_spec(num_clusters=0)
