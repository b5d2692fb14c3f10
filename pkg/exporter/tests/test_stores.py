"""Store writer: layout, validation, atomicity leftovers."""

import numpy as np
import pytest

from feature_exporter import ExportError, ids_path, read_ids, read_store, write_store


def _sample(count=5, dim=8, seed=0):
    rng = np.random.default_rng(seed)
    return [f"row-{i}" for i in range(count)], rng.standard_normal((count, dim))


def test_round_trip(tmp_path):
    ids, rows = _sample()
    path = tmp_path / "x.emb"
    write_store(path, ids, rows)
    got_ids, got_rows = read_store(path)
    assert got_ids == ids
    assert got_rows.dtype == np.dtype("<f4")
    np.testing.assert_array_equal(got_rows, rows.astype("<f4"))


def test_rewrite_is_byte_identical(tmp_path):
    ids, rows = _sample()
    path = tmp_path / "x.emb"
    write_store(path, ids, rows)
    first = path.read_bytes(), ids_path(path).read_bytes()
    write_store(path, ids, rows.copy())
    assert (path.read_bytes(), ids_path(path).read_bytes()) == first


def test_header_fields(tmp_path):
    ids, rows = _sample(count=3, dim=7)
    path = tmp_path / "x.emb"
    write_store(path, ids, rows)
    blob = path.read_bytes()
    assert blob[:4] == b"REMB"
    assert int.from_bytes(blob[4:8], "little") == 1
    assert int.from_bytes(blob[8:12], "little") == 7
    assert int.from_bytes(blob[12:20], "little") == 3
    assert len(blob) == 20 + 4 * 21


def test_empty_store_round_trips(tmp_path):
    path = tmp_path / "empty.emb"
    write_store(path, [], np.zeros((0, 4)))
    got_ids, got_rows = read_store(path)
    assert got_ids == [] and got_rows.shape == (0, 4)


@pytest.mark.parametrize("ids,rows,hint", [
    (["a"], np.zeros(3), "2-D"),
    (["a", "b"], np.zeros((1, 3)), "ids for"),
    ([""], np.zeros((1, 3)), "non-empty"),
    (["a\nb"], np.zeros((1, 3)), "newline"),
    (["a", "a"], np.zeros((2, 3)), "duplicate"),
])
def test_rejects_malformed(tmp_path, ids, rows, hint):
    with pytest.raises(ExportError, match=hint):
        write_store(tmp_path / "bad.emb", ids, rows)


def test_rejects_non_finite_rows(tmp_path):
    rows = np.zeros((3, 2))
    rows[1, 0] = np.nan
    with pytest.raises(ExportError, match="row-1"):
        write_store(tmp_path / "bad.emb", ["row-0", "row-1", "row-2"], rows)


def test_no_temp_files_left_behind(tmp_path):
    ids, rows = _sample()
    write_store(tmp_path / "x.emb", ids, rows)
    names = sorted(p.name for p in tmp_path.iterdir())
    assert names == ["x.emb", "x.ids"]


def test_read_ids_matches_sidecar(tmp_path):
    ids, rows = _sample(count=4)
    path = tmp_path / "x.emb"
    write_store(path, ids, rows)
    assert read_ids(path) == ids
