"""On-disk embedding format: loading, validation errors, splits, round trips."""

import json
import os

import numpy as np
import pytest

from capforge import (
    DatasetFormatError,
    EmbeddingDataset,
    SplitSpec,
    ValidationError,
    load_dataset,
    make_ssl_split,
    make_trzsl_split,
    save_dataset,
)


def unit_rows(rng, n, d):
    X = rng.standard_normal((n, d))
    return (X / np.linalg.norm(X, axis=1, keepdims=True)).astype(np.float32)


def write_raw(tmp_path, images, texts, labels=None, splits=None, manifest_extra=None):
    """Write a dataset directory by hand, bypassing save_dataset."""
    n, d = images.shape
    c = texts.shape[0]
    np.asarray(images, dtype="<f4").tofile(tmp_path / "image_features.f32")
    np.asarray(texts, dtype="<f4").tofile(tmp_path / "text_features.f32")
    manifest = {
        "version": 1,
        "n_samples": n,
        "n_classes": c,
        "dim": d,
        "class_names": [f"class-{i}" for i in range(c)],
        "labels": [int(x) for x in (labels if labels is not None else [-1] * n)],
        "files": {"image_features": "image_features.f32",
                  "text_features": "text_features.f32"},
        "splits": splits or {},
    }
    manifest.update(manifest_extra or {})
    (tmp_path / "manifest.json").write_text(json.dumps(manifest))
    return tmp_path


@pytest.fixture
def small_dir(tmp_path, rng):
    return write_raw(tmp_path, unit_rows(rng, 4, 3), unit_rows(rng, 2, 3),
                     labels=[0, 1, 0, 1])


# --------------------------------------------------------------------------
# loading


def test_load_shape_arithmetic(small_dir):
    ds = load_dataset(str(small_dir))
    assert ds.n_samples == 4 and ds.n_classes == 2 and ds.dim == 3
    assert ds.image_features.shape == (4, 3)
    assert os.path.getsize(small_dir / "image_features.f32") == 4 * 3 * 4


def test_load_normalizes_off_unit_rows(tmp_path):
    images = np.array([[3.0, 4.0, 0.0], [1.0, 0.0, 0.0]], dtype=np.float32)
    texts = np.array([[0.0, 1.0, 0.0]], dtype=np.float32)
    ds = load_dataset(str(write_raw(tmp_path, images, texts, labels=[0, 0])))
    assert np.allclose(ds.image_features[0], [0.6, 0.8, 0.0], atol=1e-7)
    # an already-unit row is untouched bit for bit
    assert ds.image_features[1].tobytes() == images[1].tobytes()


def test_load_rejects_byte_length_mismatch(small_dir):
    data = (small_dir / "image_features.f32").read_bytes()
    (small_dir / "image_features.f32").write_bytes(data[:36])
    with pytest.raises(DatasetFormatError) as err:
        load_dataset(str(small_dir))
    assert err.value.reason == "byte-length-mismatch"


def test_load_rejects_missing_manifest(tmp_path):
    with pytest.raises(DatasetFormatError) as err:
        load_dataset(str(tmp_path))
    assert err.value.reason == "missing-file"


def test_load_rejects_missing_feature_file(small_dir):
    (small_dir / "text_features.f32").unlink()
    with pytest.raises(DatasetFormatError) as err:
        load_dataset(str(small_dir))
    assert err.value.reason == "missing-file"


def test_load_rejects_unreadable_manifest(small_dir):
    (small_dir / "manifest.json").write_text("{not json")
    with pytest.raises(DatasetFormatError) as err:
        load_dataset(str(small_dir))
    assert err.value.reason == "bad-manifest"


def test_load_rejects_unsupported_version(tmp_path, rng):
    d = write_raw(tmp_path, unit_rows(rng, 2, 3), unit_rows(rng, 2, 3),
                  manifest_extra={"version": 9})
    with pytest.raises(DatasetFormatError) as err:
        load_dataset(str(d))
    assert err.value.reason == "bad-manifest"


def test_load_rejects_zero_norm_row(tmp_path, rng):
    images = unit_rows(rng, 3, 4)
    images[1] = 0.0
    with pytest.raises(DatasetFormatError) as err:
        load_dataset(str(write_raw(tmp_path, images, unit_rows(rng, 2, 4))))
    assert err.value.reason == "zero-norm-row"


def test_load_rejects_label_out_of_range(tmp_path, rng):
    d = write_raw(tmp_path, unit_rows(rng, 3, 4), unit_rows(rng, 2, 4),
                  labels=[0, 1, 2])
    with pytest.raises(DatasetFormatError) as err:
        load_dataset(str(d))
    assert err.value.reason == "label-out-of-range"


def test_load_allows_unknown_labels(tmp_path, rng):
    d = write_raw(tmp_path, unit_rows(rng, 3, 4), unit_rows(rng, 2, 4),
                  labels=[-1, 1, -1])
    ds = load_dataset(str(d))
    assert not ds.has_labels()
    assert ds.has_labels([1])


def test_load_rejects_train_test_overlap(tmp_path, rng):
    d = write_raw(tmp_path, unit_rows(rng, 4, 3), unit_rows(rng, 2, 3),
                  labels=[0, 1, 0, 1],
                  splits={"train_unlabeled": [0, 1], "test": [1, 2]})
    with pytest.raises(DatasetFormatError) as err:
        load_dataset(str(d))
    assert err.value.reason == "malformed-split"


def test_load_rejects_out_of_range_split_index(tmp_path, rng):
    d = write_raw(tmp_path, unit_rows(rng, 4, 3), unit_rows(rng, 2, 3),
                  splits={"test": [4]})
    with pytest.raises(DatasetFormatError) as err:
        load_dataset(str(d))
    assert err.value.reason == "malformed-split"


def test_load_rejects_labeled_sample_outside_seen(tmp_path, rng):
    d = write_raw(tmp_path, unit_rows(rng, 4, 3), unit_rows(rng, 2, 3),
                  labels=[0, 1, 0, 1],
                  splits={"train_labeled": [1], "seen_classes": [0],
                          "unseen_classes": [1]})
    with pytest.raises(DatasetFormatError) as err:
        load_dataset(str(d))
    assert err.value.reason == "malformed-split"


def test_load_rejects_partial_seen_cover(tmp_path, rng):
    d = write_raw(tmp_path, unit_rows(rng, 4, 3), unit_rows(rng, 3, 3),
                  labels=[0, 1, 2, 0],
                  splits={"seen_classes": [0], "unseen_classes": [1]})
    with pytest.raises(DatasetFormatError) as err:
        load_dataset(str(d))
    assert err.value.reason == "malformed-split"


# --------------------------------------------------------------------------
# round trip


def test_save_load_round_trip_is_bit_exact(tmp_path, clean_ds):
    out = tmp_path / "ds"
    save_dataset(clean_ds, str(out))
    back = load_dataset(str(out))
    assert back.image_features.tobytes() == clean_ds.image_features.tobytes()
    assert back.text_features.tobytes() == clean_ds.text_features.tobytes()
    assert back.image_features_aug.tobytes() == clean_ds.image_features_aug.tobytes()
    assert np.array_equal(back.labels, clean_ds.labels)
    assert back.class_names == clean_ds.class_names
    assert np.array_equal(back.splits.test, clean_ds.splits.test)

    # a second save of the loaded dataset is byte-identical on disk
    out2 = tmp_path / "ds2"
    save_dataset(back, str(out2))
    for name in ("image_features.f32", "text_features.f32", "manifest.json"):
        assert (out / name).read_bytes() == (out2 / name).read_bytes()


# --------------------------------------------------------------------------
# splits


def big_labeled_ds(rng, n_classes=100, per_class=2, dim=8):
    n = n_classes * per_class
    return EmbeddingDataset(
        n_samples=n, n_classes=n_classes, dim=dim,
        image_features=unit_rows(rng, n, dim),
        text_features=unit_rows(rng, n_classes, dim),
        class_names=[f"c{i}" for i in range(n_classes)],
        labels=np.repeat(np.arange(n_classes), per_class),
    )


def test_trzsl_split_62_38(rng):
    ds = big_labeled_ds(rng, n_classes=100)
    sp = make_trzsl_split(ds, seen_fraction=0.62, seed=0)
    assert len(sp.seen_classes) == 62
    assert len(sp.unseen_classes) == 38
    assert set(sp.seen_classes) | set(sp.unseen_classes) == set(range(100))
    assert not set(sp.seen_classes) & set(sp.unseen_classes)


def test_trzsl_split_ceils_class_count(rng):
    ds = big_labeled_ds(rng, n_classes=10)
    sp = make_trzsl_split(ds, seen_fraction=0.62, seed=1)
    assert len(sp.seen_classes) == 7


def test_trzsl_split_deterministic(rng):
    ds = big_labeled_ds(rng, n_classes=20)
    a = make_trzsl_split(ds, 0.62, seed=5)
    b = make_trzsl_split(ds, 0.62, seed=5)
    c = make_trzsl_split(ds, 0.62, seed=6)
    assert np.array_equal(a.seen_classes, b.seen_classes)
    assert not np.array_equal(a.seen_classes, c.seen_classes)


def test_trzsl_split_routes_samples_by_class(rng):
    ds = big_labeled_ds(rng, n_classes=10, per_class=3)
    sp = make_trzsl_split(ds, 0.62, seed=2)
    assert np.all(np.isin(ds.labels[sp.train_labeled], sp.seen_classes))
    assert np.all(np.isin(ds.labels[sp.train_unlabeled], sp.unseen_classes))
    assert len(sp.train_labeled) + len(sp.train_unlabeled) == ds.n_samples


def test_trzsl_split_requires_labels(rng):
    ds = big_labeled_ds(rng, n_classes=5)
    ds.labels = np.full(ds.n_samples, -1, dtype=np.int64)
    with pytest.raises(ValidationError):
        make_trzsl_split(ds, 0.62, seed=0)


def test_trzsl_split_rejects_bad_fraction(rng):
    ds = big_labeled_ds(rng, n_classes=5)
    with pytest.raises(ValidationError):
        make_trzsl_split(ds, 1.0, seed=0)


def test_ssl_split_exact_labeled_counts(rng):
    ds = big_labeled_ds(rng, n_classes=8, per_class=5)
    sp = make_ssl_split(ds, n_labeled=2, seed=3)
    counts = np.bincount(ds.labels[sp.train_labeled], minlength=8)
    assert np.all(counts == 2)
    assert not set(sp.train_labeled) & set(sp.train_unlabeled)
    assert len(sp.train_labeled) + len(sp.train_unlabeled) == ds.n_samples


def test_ssl_split_rejects_thin_classes(rng):
    ds = big_labeled_ds(rng, n_classes=4, per_class=1)
    with pytest.raises(ValidationError):
        make_ssl_split(ds, n_labeled=2, seed=0)


def test_unlabeled_pool_prefers_declared_split(rng):
    ds = big_labeled_ds(rng, n_classes=4, per_class=3)
    assert np.array_equal(ds.unlabeled_pool(), np.arange(12))
    ds.splits = SplitSpec(train_unlabeled=np.array([3, 4], dtype=np.int64))
    assert np.array_equal(ds.unlabeled_pool(), [3, 4])
    ds.splits = SplitSpec(test=np.array([0, 1], dtype=np.int64),
                          train_labeled=np.array([2], dtype=np.int64))
    assert np.array_equal(ds.unlabeled_pool(), np.arange(3, 12))
