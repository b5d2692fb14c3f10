"""Image and text export: ids, determinism, skip policy, batching."""

import logging
import shutil

import numpy as np
import pytest

from feature_exporter import (ExportError, ExportJob, export_images,
                              export_texts, ids_path, list_images, read_store)


def _image_job(dataset, tmp_path, **kw):
    return ExportJob(encoder=kw.pop("encoder", "hashed-16"),
                     out_path=tmp_path / "images.emb",
                     image_dir=dataset["images"], **kw)


def test_export_images_counts_and_ids(dataset, tmp_path):
    report = export_images(_image_job(dataset, tmp_path))
    assert (report.count, report.dim, report.skipped) == (10, 16, [])
    ids, rows = read_store(tmp_path / "images.emb")
    assert ids == sorted(dataset["names"])
    assert rows.shape == (10, 16)
    assert not any(i.startswith("/") for i in ids)
    assert any("/" in i for i in ids)  # nested category dirs survive


def test_export_images_idempotent(dataset, tmp_path):
    path = tmp_path / "images.emb"
    export_images(_image_job(dataset, tmp_path))
    first = path.read_bytes(), ids_path(path).read_bytes()
    export_images(_image_job(dataset, tmp_path))
    assert (path.read_bytes(), ids_path(path).read_bytes()) == first


def test_batch_size_does_not_change_rows(dataset, tmp_path):
    export_images(_image_job(dataset, tmp_path, batch_size=3))
    small = (tmp_path / "images.emb").read_bytes()
    export_images(_image_job(dataset, tmp_path, batch_size=64))
    assert (tmp_path / "images.emb").read_bytes() == small


def test_undecodable_image_skipped_with_log(dataset, tmp_path, caplog):
    broken_dir = tmp_path / "copy"
    shutil.copytree(dataset["images"], broken_dir)
    (broken_dir / "broken.png").write_bytes(b"not a png at all")
    job = ExportJob(encoder="hashed-16", out_path=tmp_path / "images.emb",
                    image_dir=broken_dir)
    with caplog.at_level(logging.WARNING, logger="feature_exporter"):
        report = export_images(job)
    assert report.skipped == ["broken.png"]
    assert report.count == 10
    assert "broken.png" in caplog.text
    ids, _ = read_store(tmp_path / "images.emb")
    assert "broken.png" not in ids


def test_strict_aborts_on_undecodable(dataset, tmp_path):
    broken_dir = tmp_path / "copy"
    shutil.copytree(dataset["images"], broken_dir)
    (broken_dir / "broken.png").write_bytes(b"junk")
    job = ExportJob(encoder="hashed-16", out_path=tmp_path / "images.emb",
                    image_dir=broken_dir)
    with pytest.raises(ExportError, match="broken.png"):
        export_images(job, strict=True)
    assert not (tmp_path / "images.emb").exists()


def test_missing_image_dir(tmp_path):
    job = ExportJob(encoder="hashed-16", out_path=tmp_path / "x.emb",
                    image_dir=tmp_path / "nowhere")
    with pytest.raises(ExportError, match="does not exist"):
        export_images(job)


def test_empty_image_dir_writes_empty_store(tmp_path):
    (tmp_path / "imgs").mkdir()
    job = ExportJob(encoder="hashed-16", out_path=tmp_path / "x.emb",
                    image_dir=tmp_path / "imgs")
    report = export_images(job)
    assert (report.count, report.dim) == (0, 16)
    ids, rows = read_store(tmp_path / "x.emb")
    assert ids == [] and rows.shape == (0, 16)


def test_list_images_ignores_other_files(tmp_path):
    (tmp_path / "a.png").write_bytes(b"x")
    (tmp_path / "notes.txt").write_bytes(b"x")
    (tmp_path / "b.JPG").write_bytes(b"x")
    assert list_images(tmp_path) == ["a.png", "b.JPG"]


def test_export_texts_counts_and_order(tmp_path):
    captions = {"t2": "blue", "t0": "red", "t1": "green"}
    job = ExportJob(encoder="hashed-16", out_path=tmp_path / "texts.emb",
                    captions=captions)
    report = export_texts(job)
    assert (report.count, report.dim) == (3, 16)
    ids, rows = read_store(tmp_path / "texts.emb")
    assert ids == ["t0", "t1", "t2"]
    assert np.isfinite(rows).all()


def test_export_texts_empty_caption_warns_but_exports(tmp_path, caplog):
    job = ExportJob(encoder="hashed-16", out_path=tmp_path / "texts.emb",
                    captions={"t0": "", "t1": "fine"})
    with caplog.at_level(logging.WARNING, logger="feature_exporter"):
        report = export_texts(job)
    assert report.count == 2
    assert "empty caption" in caplog.text and "t0" in caplog.text
    _, rows = read_store(tmp_path / "texts.emb")
    assert np.isfinite(rows).all() and np.abs(rows[0]).sum() > 0


def test_towers_share_dim(dataset, tmp_path):
    img = export_images(_image_job(dataset, tmp_path))
    txt = export_texts(ExportJob(encoder="hashed-16",
                                 out_path=tmp_path / "texts.emb",
                                 captions={"t": "x"}))
    assert img.dim == txt.dim


def test_job_validates_batch_size(tmp_path):
    with pytest.raises(ExportError, match="batch_size"):
        ExportJob(encoder="hashed-16", out_path=tmp_path / "x.emb",
                  batch_size=0)


def test_export_needs_matching_inputs(tmp_path):
    job = ExportJob(encoder="hashed-16", out_path=tmp_path / "x.emb")
    with pytest.raises(ExportError, match="image directory"):
        export_images(job)
    with pytest.raises(ExportError, match="caption table"):
        export_texts(job)
