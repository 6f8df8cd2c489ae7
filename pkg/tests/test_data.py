import gzip
import math
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from kwta_ensemble.data import (
    DATA_DIR_ENV,
    Dataset,
    DatasetMissingError,
    FormatError,
    batch_indices,
    batches,
    fixed_test_split_spec,
    holdout_split_spec,
    load_idx,
    load_wdbc,
    oversample_minority,
    prepare_dataset,
    read_idx,
    resolve_data_dir,
    split,
    standardize,
    write_idx,
)
from kwta_ensemble.linalg import make_rng

FIXTURES = Path(__file__).parent / "fixtures"


# --- IDX --------------------------------------------------------------------------


def test_idx_fixture_exact_vectors():
    ds = load_idx(FIXTURES / "two_images-idx3-ubyte", FIXTURES / "two_labels-idx1-ubyte")
    assert ds.features.shape == (2, 784)
    assert ds.labels.tolist() == [7, 3]
    first = np.zeros(784)
    first[0] = 1.0
    first[29] = 102 / 255
    first[783] = 51 / 255
    np.testing.assert_array_equal(ds.features[0], first)
    np.testing.assert_array_equal(ds.features[1], [(i % 256) / 255 for i in range(784)])
    assert ds.features.max() == 1.0


def test_idx_roundtrip_fixture(tmp_path):
    images = read_idx(FIXTURES / "two_images-idx3-ubyte")
    write_idx(tmp_path / "img", images)
    assert (tmp_path / "img").read_bytes() == (FIXTURES / "two_images-idx3-ubyte").read_bytes()


@given(arrays(np.uint8, st.tuples(st.integers(0, 4), st.integers(1, 5), st.integers(1, 5))), st.booleans())
@settings(max_examples=30, deadline=None)
def test_idx_roundtrip_property(tmp_path_factory, arr, compress):
    path = tmp_path_factory.mktemp("idx") / "a"
    write_idx(path, arr, compress=compress)
    assert np.array_equal(read_idx(path), arr)


def test_idx_gzip_autodetect(tmp_path):
    raw = (FIXTURES / "two_labels-idx1-ubyte").read_bytes()
    (tmp_path / "l.gz").write_bytes(gzip.compress(raw))
    assert read_idx(tmp_path / "l.gz").tolist() == [7, 3]


def test_idx_bad_magic_reports_bytes(tmp_path):
    (tmp_path / "bad").write_bytes(b"\x12\x34\x08\x01\x00\x00\x00\x00")
    with pytest.raises(FormatError, match="12340801"):
        read_idx(tmp_path / "bad")


def test_idx_count_mismatch(tmp_path):
    write_idx(tmp_path / "l", np.array([1, 2, 3], dtype=np.uint8))
    with pytest.raises(FormatError, match="2 images but 3 labels"):
        load_idx(FIXTURES / "two_images-idx3-ubyte", tmp_path / "l")


def test_idx_truncated_payload(tmp_path):
    raw = (FIXTURES / "two_labels-idx1-ubyte").read_bytes()
    (tmp_path / "l").write_bytes(raw[:-1])
    with pytest.raises(FormatError):
        read_idx(tmp_path / "l")


def test_idx_swapped_files_rejected():
    with pytest.raises(FormatError):
        load_idx(FIXTURES / "two_labels-idx1-ubyte", FIXTURES / "two_images-idx3-ubyte")


# --- WDBC -------------------------------------------------------------------------


def test_wdbc_single_row_fixture():
    ds = load_wdbc(FIXTURES / "wdbc_one_row.data")
    assert ds.labels.tolist() == [1]
    assert ds.features.shape == (1, 30)
    assert ds.features[0, 0] == 17.99 and ds.features[0, 3] == 1001.0 and ds.features[0, 29] == 0.1189


def test_wdbc_full_table(data_dir):
    ds = load_wdbc(data_dir / "wdbc" / "wdbc.data")
    assert (len(ds), ds.dim) == (569, 30)
    assert dict(enumerate(ds.class_counts().tolist())) == {0: 357, 1: 212}


def test_wdbc_malformed_row_has_line_number(tmp_path):
    good = (FIXTURES / "wdbc_one_row.data").read_text()
    (tmp_path / "w").write_text(good + "1,X," + ",".join(["0"] * 30) + "\n")
    with pytest.raises(FormatError, match=":2:"):
        load_wdbc(tmp_path / "w")
    (tmp_path / "w").write_text(good + "1,B,0\n")
    with pytest.raises(FormatError, match=":2:"):
        load_wdbc(tmp_path / "w")


# --- oversampling and splits -----------------------------------------------------


def test_oversample_wdbc_to_714(data_dir):
    ds = load_wdbc(data_dir / "wdbc" / "wdbc.data")
    out = oversample_minority(ds, make_rng(0))
    assert len(out) == 714
    assert out.class_counts().tolist() == [357, 357]
    np.testing.assert_array_equal(out.features[:569], ds.features)


def test_oversample_toy_three_vs_one():
    ds = Dataset(np.array([[0.0], [1.0], [2.0], [9.0]]), np.array([0, 0, 0, 1]), 2)
    out = oversample_minority(ds, make_rng(1))
    assert len(out) == 6 and out.class_counts().tolist() == [3, 3]
    for row, label in zip(out.features[4:], out.labels[4:]):
        assert label == 1 and row.tolist() == [9.0]


def test_oversample_balanced_unchanged_and_single_class_rejected():
    ds = Dataset(np.eye(2), np.array([0, 1]), 2)
    assert oversample_minority(ds, make_rng(0)) is ds
    with pytest.raises(ValueError):
        oversample_minority(Dataset(np.eye(2), np.array([1, 1]), 2), make_rng(0))


@given(st.integers(2, 40), st.integers(1, 40), st.integers(0, 2**32))
@settings(max_examples=40)
def test_oversample_always_balances(a, b, seed):
    labels = np.array([0] * a + [1] * b)
    ds = Dataset(np.arange(a + b, dtype=float)[:, None], labels, 2)
    out = oversample_minority(ds, make_rng(seed))
    c = out.class_counts()
    assert c[0] == c[1] == max(a, b)


def test_holdout_sizes_450_50_214():
    spec = holdout_split_spec(714, seed=5)
    assert (spec.train.size, spec.val.size, spec.test.size) == (450, 50, 214)
    joined = np.concatenate([spec.train, spec.val, spec.test])
    assert sorted(joined.tolist()) == list(range(714))


def test_split_determinism_and_seed_sensitivity():
    a, b, c = holdout_split_spec(200, 1), holdout_split_spec(200, 1), holdout_split_spec(200, 2)
    for part in ("train", "val", "test"):
        assert np.array_equal(getattr(a, part), getattr(b, part))
    assert not np.array_equal(a.test, c.test)


def test_mnist_validation_is_6000_and_pool_54000():
    spec = fixed_test_split_spec(60_000, 10_000, seed=3)
    assert spec.val.size == 6_000 and spec.train.size == 54_000
    assert spec.test.min() == 60_000
    assert 20 * math.ceil(spec.train.size / 100) == 10_800


def test_train_limit_applies_before_validation():
    spec = fixed_test_split_spec(60_000, 10_000, seed=3, train_limit=10_000)
    assert (spec.train.size, spec.val.size) == (9_000, 1_000)


def test_standardize_uses_train_statistics(rng):
    train = Dataset(rng.normal(5, 3, size=(50, 4)), np.zeros(50, dtype=int), 2)
    test = Dataset(rng.normal(5, 3, size=(10, 4)), np.zeros(10, dtype=int), 2)
    st_train, st_test = standardize(train, test)
    np.testing.assert_allclose(st_train.features.mean(axis=0), 0, atol=1e-9)
    np.testing.assert_allclose(st_train.features.std(axis=0), 1, atol=1e-9)
    mu, sd = train.features.mean(axis=0), train.features.std(axis=0)
    np.testing.assert_allclose(st_test.features, (test.features - mu) / sd)


def test_standardize_zero_variance_column():
    train = Dataset(np.array([[1.0, 2.0], [1.0, 4.0]]), np.array([0, 1]), 2)
    (out,) = standardize(train)
    assert out.features[:, 0].tolist() == [0.0, 0.0]


def test_prepare_wdbc(data_dir):
    train, val, test = prepare_dataset("wdbc", data_dir, seed=42)
    assert (len(train), len(val), len(test)) == (450, 50, 214)
    np.testing.assert_allclose(train.features.mean(axis=0), 0, atol=1e-9)
    again = prepare_dataset("wdbc", data_dir, seed=42)
    assert np.array_equal(again[2].features, test.features)
    assert 20 * math.ceil(len(train) / 100) == 100


def test_prepare_wdbc_split_first(data_dir):
    train, val, test = prepare_dataset("wdbc", data_dir, seed=42, split_first=True)
    # 569 -> 171 test, 398 pool -> 40 val, 358 train, then train is balanced
    assert (len(val), len(test)) == (40, 171)
    c = train.class_counts()
    assert c[0] == c[1]


def test_prepare_mnist_missing(tmp_path):
    with pytest.raises(DatasetMissingError, match="fetch mnist"):
        prepare_dataset("mnist", tmp_path, seed=0)


def test_prepare_idx_layout(tmp_path):
    r = make_rng(0)
    folder = tmp_path / "mnist"
    folder.mkdir()
    write_idx(folder / "train-images-idx3-ubyte", r.integers(0, 256, (50, 28, 28), dtype=np.uint8))
    write_idx(folder / "train-labels-idx1-ubyte", r.integers(0, 10, 50, dtype=np.uint8))
    write_idx(folder / "t10k-images-idx3-ubyte.gz", r.integers(0, 256, (7, 28, 28), dtype=np.uint8), compress=True)
    write_idx(folder / "t10k-labels-idx1-ubyte.gz", r.integers(0, 10, 7, dtype=np.uint8), compress=True)
    train, val, test = prepare_dataset("mnist", tmp_path, seed=1)
    assert (len(train), len(val), len(test)) == (45, 5, 7)
    assert train.dim == 784 and 0.0 <= train.features.min() and train.features.max() <= 1.0


# --- batching and paths -----------------------------------------------------------


def test_batches_250_by_100():
    sizes = [b.size for b in batch_indices(250, 100, make_rng(0))]
    assert sizes == [100, 100, 50]


@given(st.integers(0, 300), st.integers(1, 64), st.integers(0, 1000))
def test_batches_partition(n, bs, seed):
    idx = list(batch_indices(n, bs, make_rng(seed)))
    flat = np.concatenate(idx) if idx else np.array([], dtype=int)
    assert sorted(flat.tolist()) == list(range(n))
    assert len(idx) == math.ceil(n / bs)


def test_batches_reproducible(rng):
    ds = Dataset(rng.normal(size=(30, 2)), np.zeros(30, dtype=int), 2)
    a = [y.tolist() for _, y in batches(ds, 7, make_rng(3))]
    b = [y.tolist() for _, y in batches(ds, 7, make_rng(3))]
    assert a == b


def test_resolve_data_dir(monkeypatch):
    monkeypatch.delenv(DATA_DIR_ENV, raising=False)
    assert resolve_data_dir() == Path("data")
    monkeypatch.setenv(DATA_DIR_ENV, "/x")
    assert resolve_data_dir() == Path("/x")
    assert resolve_data_dir("/y") == Path("/y")


def test_dataset_validation():
    with pytest.raises(ValueError):
        Dataset(np.zeros((2, 2)), np.array([0, 3]), 2)
    with pytest.raises(ValueError):
        Dataset(np.zeros((2, 2)), np.array([0]), 2)


def test_split_spec_rejects_overlap():
    from kwta_ensemble.data import SplitSpec

    with pytest.raises(ValueError):
        SplitSpec([0, 1], [1], [2], seed=0)
    ds = Dataset(np.arange(3.0)[:, None], np.array([0, 1, 0]), 2)
    tr, va, te = split(ds, SplitSpec([0], [1], [2], seed=0))
    assert (tr.features[0, 0], va.features[0, 0], te.features[0, 0]) == (0.0, 1.0, 2.0)
