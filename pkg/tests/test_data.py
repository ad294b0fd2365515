import gzip

import numpy as np
import pytest
from hypothesis import given, strategies as st

from genesnn.data import (Dataset, add_gaussian_noise, encode_spikes, load_csv, load_idx, make_blobs,
                          read_idx, save_csv, stratified_split, write_idx)
from genesnn.errors import ParseError


# ---------------------------------------------------------------- IDX

@pytest.mark.parametrize("dtype", [np.uint8, np.int8, np.int16, np.int32, np.float32, np.float64])
def test_idx_round_trip(tmp_path, rng, dtype):
    arr = (rng.normal(size=(3, 4, 5)) * 50).astype(dtype)
    path = tmp_path / "a.idx"
    write_idx(path, arr)
    back = read_idx(path)
    assert back.dtype.newbyteorder("=") == np.dtype(dtype).newbyteorder("=")
    np.testing.assert_array_equal(back, arr)


def test_idx_header_layout(tmp_path):
    path = tmp_path / "h.idx"
    write_idx(path, np.zeros((2, 3), dtype=np.uint8))
    raw = path.read_bytes()
    assert raw[:4] == b"\x00\x00\x08\x02"
    assert raw[4:12] == b"\x00\x00\x00\x02\x00\x00\x00\x03"


def test_idx_gzip(tmp_path):
    arr = np.arange(24, dtype=np.uint8).reshape(2, 3, 4)
    write_idx(tmp_path / "a.idx.gz", arr)
    with gzip.open(tmp_path / "a.idx.gz") as fh:
        assert fh.read(4) == b"\x00\x00\x08\x03"
    np.testing.assert_array_equal(read_idx(tmp_path / "a.idx.gz"), arr)


@pytest.mark.parametrize("cut,match", [(2, "byte offset 2"), (6, "byte offset 6"), (20, "byte offset 20")])
def test_idx_truncation_reports_offset(tmp_path, cut, match):
    path = tmp_path / "t.idx"
    write_idx(path, np.zeros((2, 3, 3), dtype=np.uint8))
    path.write_bytes(path.read_bytes()[:cut])
    with pytest.raises(ParseError, match=match):
        read_idx(path)


def test_idx_bad_magic(tmp_path):
    path = tmp_path / "m.idx"
    path.write_bytes(b"\x01\x00\x08\x01\x00\x00\x00\x00")
    with pytest.raises(ParseError, match="magic"):
        read_idx(path)


def test_load_idx_pair(tmp_path, rng):
    images = rng.integers(0, 256, size=(40, 5, 5), dtype=np.uint8)
    labels = np.repeat(np.arange(4), 10).astype(np.uint8)
    write_idx(tmp_path / "x.idx", images)
    write_idx(tmp_path / "y.idx", labels)
    ds = load_idx(tmp_path / "x.idx", tmp_path / "y.idx", split_seed=1)
    assert ds.samples.shape == (40, 1, 5, 5)
    assert ds.n_classes == 4
    np.testing.assert_allclose(ds.samples[:, 0], images / 255.0)
    write_idx(tmp_path / "y_short.idx", labels[:30])
    with pytest.raises(ParseError):
        load_idx(tmp_path / "x.idx", tmp_path / "y_short.idx")


# ---------------------------------------------------------------- CSV

def test_csv_round_trip_is_exact(tmp_path, rng):
    x = rng.uniform(0, 1, size=(20, 6))
    y = np.arange(20) % 3
    ds = Dataset(x, y, 3, stratified_split(y, 0))
    save_csv(tmp_path / "d.csv", ds)
    back = load_csv(tmp_path / "d.csv", {"shape": [2, 3]})
    np.testing.assert_array_equal(back.samples.reshape(20, 6), x)
    np.testing.assert_array_equal(back.labels, y)
    assert back.sample_shape == (2, 3)


def test_csv_scaling(tmp_path):
    (tmp_path / "d.csv").write_text("x0,label,x1\n0,0,255\n51,1,102\n")
    ds = load_csv(tmp_path / "d.csv", {"max_value": 255})
    np.testing.assert_allclose(ds.samples, [[0, 1], [0.2, 0.4]])
    np.testing.assert_array_equal(ds.labels, [0, 1])
    ds = load_csv(tmp_path / "d.csv")
    assert ds.samples.min() == 0.0 and ds.samples.max() == 1.0


@pytest.mark.parametrize("text,match", [
    ("", "line 1"),
    ("a,b\n1,2\n", "label"),
    ("label,x\n0,1\n1\n", "line 3"),
    ("label,x\n0,1\n1,abc\n", "line 3"),
])
def test_csv_errors_name_the_line(tmp_path, text, match):
    (tmp_path / "bad.csv").write_text(text)
    with pytest.raises(ParseError, match=match):
        load_csv(tmp_path / "bad.csv")


# ---------------------------------------------------------------- splits and blobs

@given(st.lists(st.integers(0, 4), min_size=1, max_size=200), st.integers(0, 2 ** 32 - 1))
def test_split_is_a_disjoint_cover(labels, seed):
    labels = np.array(labels)
    parts = stratified_split(labels, seed)
    joined = np.concatenate([parts["train"], parts["val"], parts["test"]])
    assert sorted(joined.tolist()) == list(range(len(labels)))


def test_split_is_stratified():
    labels = np.repeat(np.arange(5), 20)
    parts = stratified_split(labels, 3)
    for c in range(5):
        assert np.sum(labels[parts["train"]] == c) == 16
        assert np.sum(labels[parts["val"]] == c) == 2
        assert np.sum(labels[parts["test"]] == c) == 2


def test_blobs_shape_range_and_determinism():
    a = make_blobs(4, 25, 3, 5.0, seed=9)
    b = make_blobs(4, 25, 3, 5.0, seed=9)
    assert a.samples.shape == (100, 3) and a.n_classes == 4
    assert a.samples.min() == 0.0 and a.samples.max() == 1.0
    np.testing.assert_array_equal(a.samples, b.samples)
    assert not np.array_equal(a.samples, make_blobs(4, 25, 3, 5.0, seed=10).samples)


def test_well_separated_blobs_are_linearly_separable():
    # nearest-class-mean on the training split classifies the test split
    ds = make_blobs(3, 60, 2, 10.0, seed=1)
    x, y = ds.split("train")
    means = np.stack([x[y == c].mean(axis=0) for c in range(3)])
    xt, yt = ds.split("test")
    pred = np.argmin(((xt[:, None] - means[None]) ** 2).sum(axis=-1), axis=1)
    assert np.mean(pred == yt) >= 0.95


def test_blobs_validation():
    with pytest.raises(ValueError):
        make_blobs(0, 10, 2, 1.0, 0)


def test_dataset_validation():
    with pytest.raises(ValueError):
        Dataset(np.zeros((3, 2)), np.zeros(2, dtype=int), 1, {})
    with pytest.raises(ValueError):
        Dataset(np.zeros((2, 2)), np.array([0, 2]), 2, {})


# ---------------------------------------------------------------- coding

def test_constant_coding_repeats_the_input(rng):
    x = rng.uniform(size=(3, 4))
    enc = encode_spikes(x, 5)
    assert enc.shape == (5, 3, 4)
    for t in range(5):
        np.testing.assert_array_equal(enc[t], x)


def test_poisson_rate_converges_to_intensity():
    x = np.array([0.0, 0.25, 0.5, 0.9, 1.0])
    n = 10_000
    enc = encode_spikes(np.broadcast_to(x, (n, 5)), 1, mode="poisson", seed=0)
    rate = enc[0].mean(axis=0)
    tol = 3 * np.sqrt(x * (1 - x) / n)
    assert np.all(np.abs(rate - x) <= tol + 1e-12)
    assert set(np.unique(enc)) <= {0.0, 1.0}


def test_poisson_rejects_out_of_range():
    with pytest.raises(ValueError):
        encode_spikes(np.array([1.2]), 4, mode="poisson")
    with pytest.raises(ValueError):
        encode_spikes(np.zeros(2), 0)
    with pytest.raises(ValueError):
        encode_spikes(np.zeros(2), 2, mode="burst")


@given(st.floats(0.0, 2.0))
def test_noise_has_the_requested_relative_norm(level):
    x = np.random.default_rng(0).uniform(0.1, 1, size=(6, 3, 2))
    noisy = add_gaussian_noise(x, level, seed=1)
    ratio = np.linalg.norm((noisy - x).reshape(6, -1), axis=1) / np.linalg.norm(x.reshape(6, -1), axis=1)
    np.testing.assert_allclose(ratio, level, rtol=1e-10, atol=1e-12)


def test_noise_is_seeded_and_validated():
    x = np.ones((2, 3))
    np.testing.assert_array_equal(add_gaussian_noise(x, 0.5, 3), add_gaussian_noise(x, 0.5, 3))
    with pytest.raises(ValueError):
        add_gaussian_noise(x, -0.1, 0)
