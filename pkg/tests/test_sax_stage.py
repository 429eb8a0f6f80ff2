import json

import numpy as np
import pytest

from dumpy.config import IndexConfig
from dumpy.exceptions import FormatError, InvalidArgumentError
from dumpy.sax_stage import (SaxTable, build_sax_table, gen_noisy_queries, gen_random_walk, iter_batches,
                             open_dataset, write_dataset)
from dumpy.series import paa, prepare, sax_from_paa


def test_write_and_open_roundtrip(tmp_path, rng):
    X = rng.standard_normal((13, 16))
    write_dataset(X, tmp_path / "x.bin")
    again = open_dataset(tmp_path / "x.bin")
    assert (again.n, again.count) == (16, 13)
    np.testing.assert_array_equal(again.read(), X.astype("<f4"))
    assert (tmp_path / "x.bin").stat().st_size == 13 * 16 * 4
    assert json.loads((tmp_path / "x.bin.json").read_text())["n"] == 16


def test_open_without_sidecar_needs_n(tmp_path):
    np.zeros((2, 8), "<f4").tofile(tmp_path / "raw.bin")
    with pytest.raises(InvalidArgumentError):
        open_dataset(tmp_path / "raw.bin")
    assert open_dataset(tmp_path / "raw.bin", n=8).count == 2


def test_open_rejects_ragged_size(tmp_path):
    np.zeros(10, "<f4").tofile(tmp_path / "bad.bin")
    with pytest.raises(FormatError):
        open_dataset(tmp_path / "bad.bin", n=4)


def test_read_slices(tmp_path, rng):
    X = rng.standard_normal((20, 4))
    ds = write_dataset(X, tmp_path / "x.bin")
    np.testing.assert_array_equal(ds.read(5, 9), X[5:9].astype("<f4"))
    assert ds.read(18, 100).shape == (2, 4)


def test_iter_batches_covers_everything(tmp_path, rng):
    X = rng.standard_normal((23, 4))
    ds = write_dataset(X, tmp_path / "x.bin")
    blocks = list(iter_batches(ds, 5))
    assert [s for s, _ in blocks] == [0, 5, 10, 15, 20]
    np.testing.assert_array_equal(np.vstack([b for _, b in blocks]), X.astype("<f4"))


def test_random_walk_generator(tmp_path):
    ds = gen_random_walk(50, 32, 3, tmp_path / "rw.bin")
    X = ds.read().astype(np.float64)
    np.testing.assert_allclose(X.mean(axis=1), 0, atol=1e-5)
    np.testing.assert_allclose(X.std(axis=1), 1, atol=1e-4)
    gen_random_walk(50, 32, 3, tmp_path / "rw2.bin")
    assert (tmp_path / "rw.bin").read_bytes() == (tmp_path / "rw2.bin").read_bytes()


def test_noisy_queries_snr(tmp_path):
    ds = gen_random_walk(200, 256, 1, tmp_path / "rw.bin")
    q = gen_noisy_queries(ds, 40, 20.0, 2, tmp_path / "q.bin")
    Q = q.read()
    # at 20 dB the nearest indexed series is the one the query came from, and it is close
    X = ds.read().astype(np.float64)
    d = np.sqrt(((Q[:, None, :] - X[None, :, :]) ** 2).sum(-1)).min(axis=1)
    assert np.all(d < 0.25 * np.sqrt(256))


def test_sax_table_matches_scalar_pipeline(tmp_path, rng):
    X = np.cumsum(rng.standard_normal((37, 64)), axis=1)
    ds = write_dataset(X, tmp_path / "x.bin")
    table = build_sax_table(ds, 8, 256)
    for x, row in zip(ds.read(), table.rows):
        assert np.array_equal(sax_from_paa(paa(prepare(x), 8), 256), row)


@pytest.mark.parametrize("batch_rows,workers", [(1, 1), (7, 1), (7, 3), (None, 2)])
def test_sax_table_independent_of_batching(tmp_path, rng, batch_rows, workers):
    ds = write_dataset(rng.standard_normal((50, 32)), tmp_path / "x.bin")
    ref = build_sax_table(ds, 4, 64).rows
    assert np.array_equal(build_sax_table(ds, 4, 64, batch_rows=batch_rows, workers=workers).rows, ref)


def test_sax_table_roundtrip(tmp_path, rng):
    t = SaxTable(4, 8, rng.integers(0, 256, (9, 4)).astype(np.uint8))
    t.save(tmp_path / "s.bin")
    u = SaxTable.load(tmp_path / "s.bin")
    assert (u.w, u.b) == (4, 8) and np.array_equal(u.rows, t.rows)


def test_sax_table_rejects_truncation(tmp_path, rng):
    SaxTable(4, 8, np.zeros((3, 4), np.uint8)).save(tmp_path / "s.bin")
    raw = (tmp_path / "s.bin").read_bytes()
    (tmp_path / "t.bin").write_bytes(raw[:-1])
    with pytest.raises(FormatError):
        SaxTable.load(tmp_path / "t.bin")
    (tmp_path / "m.bin").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(FormatError):
        SaxTable.load(tmp_path / "m.bin")


def test_sax_rejects_bad_w(tmp_path):
    ds = write_dataset(np.zeros((2, 10)), tmp_path / "x.bin")
    with pytest.raises(InvalidArgumentError):
        build_sax_table(ds, 3, 256)


@pytest.mark.parametrize("bad", [dict(w=5, n=16), dict(th=0), dict(fuzzy=1.0), dict(rho=-1), dict(c=512),
                                 dict(fill_low=2, fill_high=1), dict(split="ternary"), dict(w=64, n=64)])
def test_config_validation(bad):
    with pytest.raises(InvalidArgumentError):
        IndexConfig(**bad)


def test_config_json_roundtrip():
    cfg = IndexConfig(n=64, w=8, th=50, fuzzy=0.2)
    assert IndexConfig.from_json(cfg.to_json()) == cfg
    with pytest.raises(FormatError):
        IndexConfig.from_json("{not json")
