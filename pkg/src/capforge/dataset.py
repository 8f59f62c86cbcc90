"""On-disk embedding dataset format and paradigm splits.

A dataset directory holds ``manifest.json`` plus headerless row-major
little-endian float32 binaries for image features, optional augmented
image features, and class text features. The loader validates byte
lengths exactly, normalizes feature rows, and rejects malformed input
with a single :class:`~capforge.errors.DatasetFormatError` reason code
per failure mode. A loaded dataset is immutable (arrays are marked
read-only) and safe for concurrent reads.
"""

import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import DatasetFormatError, ValidationError
from .validation import check_index_set, stream_rng

FORMAT_VERSION = 1
UNKNOWN_LABEL = -1
UNIT_NORM_ATOL = 1e-5


@dataclass
class SplitSpec:
    """Index sets for the three learning paradigms. Class-id sets
    ``seen_classes``/``unseen_classes`` are only meaningful for TRZSL."""

    train_unlabeled: np.ndarray = field(default_factory=lambda: np.empty(0, np.int64))
    train_labeled: np.ndarray = field(default_factory=lambda: np.empty(0, np.int64))
    test: np.ndarray = field(default_factory=lambda: np.empty(0, np.int64))
    seen_classes: np.ndarray = field(default_factory=lambda: np.empty(0, np.int64))
    unseen_classes: np.ndarray = field(default_factory=lambda: np.empty(0, np.int64))

    def to_manifest(self) -> dict:
        return {
            "train_unlabeled": [int(i) for i in self.train_unlabeled],
            "train_labeled": [int(i) for i in self.train_labeled],
            "test": [int(i) for i in self.test],
            "seen_classes": [int(c) for c in self.seen_classes],
            "unseen_classes": [int(c) for c in self.unseen_classes],
        }


@dataclass
class EmbeddingDataset:
    """Precomputed unit-norm image/text features plus labels and splits."""

    n_samples: int
    n_classes: int
    dim: int
    image_features: np.ndarray          # (N, D) float32, unit rows
    text_features: np.ndarray           # (C, D) float32, unit rows
    class_names: list[str]
    labels: np.ndarray                  # (N,) int64, -1 = unknown
    splits: SplitSpec = field(default_factory=SplitSpec)
    image_features_aug: np.ndarray | None = None

    def has_labels(self, indices=None) -> bool:
        lab = self.labels if indices is None else self.labels[indices]
        return bool(np.all(lab != UNKNOWN_LABEL))

    def unlabeled_pool(self) -> np.ndarray:
        """Sample indices the pipeline treats as the unlabeled pool.

        The declared ``train_unlabeled`` split when present; otherwise
        everything outside the test and labeled splits.
        """
        if len(self.splits.train_unlabeled):
            return self.splits.train_unlabeled
        mask = np.ones(self.n_samples, dtype=bool)
        mask[self.splits.test] = False
        mask[self.splits.train_labeled] = False
        return np.flatnonzero(mask).astype(np.int64)

    def freeze(self) -> "EmbeddingDataset":
        for arr in (self.image_features, self.text_features, self.labels,
                    self.image_features_aug):
            if arr is not None:
                arr.setflags(write=False)
        return self


def _normalize_rows(X: np.ndarray, what: str) -> np.ndarray:
    """Unit-normalize rows whose norm is outside the tolerance band.

    Rows already within 1e-5 of unit norm are left byte-identical, which
    is what makes save/load round trips bit-exact for data normalized at
    generation time. Exact zero rows are fatal.
    """
    norms = np.linalg.norm(X.astype(np.float64), axis=1)
    if np.any(norms == 0.0):
        row = int(np.argmax(norms == 0.0))
        raise DatasetFormatError("zero-norm-row", f"{what} row {row} is all zeros")
    off = np.abs(norms - 1.0) > UNIT_NORM_ATOL
    if np.any(off):
        X = X.copy()
        X[off] = (X[off].astype(np.float64) / norms[off, None]).astype(np.float32)
    return X


def _read_matrix(path: str, rows: int, cols: int, what: str) -> np.ndarray:
    if not os.path.isfile(path):
        raise DatasetFormatError("missing-file", f"{what} file not found: {path}")
    expected = rows * cols * 4
    actual = os.path.getsize(path)
    if actual != expected:
        raise DatasetFormatError(
            "byte-length-mismatch",
            f"{what}: expected {rows}x{cols}x4 = {expected} bytes, file has {actual}",
        )
    data = np.fromfile(path, dtype="<f4").reshape(rows, cols)
    return _normalize_rows(data, what)


def _parse_splits(raw: dict, n_samples: int, n_classes: int,
                  labels: np.ndarray) -> SplitSpec:
    try:
        tu = check_index_set(raw.get("train_unlabeled", []), n_samples, "train_unlabeled")
        tl = check_index_set(raw.get("train_labeled", []), n_samples, "train_labeled")
        te = check_index_set(raw.get("test", []), n_samples, "test")
        seen = check_index_set(raw.get("seen_classes", []), n_classes, "seen_classes")
        unseen = check_index_set(raw.get("unseen_classes", []), n_classes, "unseen_classes")
    except ValidationError as exc:
        raise DatasetFormatError("malformed-split", str(exc)) from exc

    train = np.concatenate([tu, tl])
    if np.intersect1d(train, te).size:
        raise DatasetFormatError("malformed-split", "train and test splits overlap")
    if seen.size or unseen.size:
        if np.intersect1d(seen, unseen).size:
            raise DatasetFormatError("malformed-split", "seen and unseen classes overlap")
        if seen.size + unseen.size != n_classes:
            raise DatasetFormatError(
                "malformed-split", "seen/unseen classes do not cover all classes")
        if tl.size:
            lab = labels[tl]
            if np.any(lab == UNKNOWN_LABEL) or not np.all(np.isin(lab, seen)):
                raise DatasetFormatError(
                    "malformed-split", "labeled sample outside seen classes")
    return SplitSpec(tu, tl, te, np.sort(seen), np.sort(unseen))


def load_dataset(path: str) -> EmbeddingDataset:
    """Load and validate a dataset directory."""
    manifest_path = os.path.join(path, "manifest.json")
    if not os.path.isfile(manifest_path):
        raise DatasetFormatError("missing-file", f"no manifest.json in {path}")
    try:
        with open(manifest_path, encoding="utf-8") as fh:
            manifest = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise DatasetFormatError("bad-manifest", f"unreadable manifest: {exc}") from exc

    try:
        version = int(manifest["version"])
        n = int(manifest["n_samples"])
        c = int(manifest["n_classes"])
        d = int(manifest["dim"])
        class_names = [str(s) for s in manifest["class_names"]]
        labels = np.asarray(manifest["labels"], dtype=np.int64)
        files = dict(manifest["files"])
        img_file = str(files["image_features"])
        txt_file = str(files["text_features"])
    except (KeyError, TypeError, ValueError) as exc:
        raise DatasetFormatError("bad-manifest", f"manifest field error: {exc}") from exc

    if version != FORMAT_VERSION:
        raise DatasetFormatError("bad-manifest", f"unsupported version {version}")
    if len(class_names) != c:
        raise DatasetFormatError("bad-manifest",
                                 f"{len(class_names)} class names for {c} classes")
    if labels.shape != (n,):
        raise DatasetFormatError("bad-manifest",
                                 f"labels length {labels.shape[0]} != n_samples {n}")
    if np.any((labels < UNKNOWN_LABEL) | (labels >= c)):
        bad = int(labels[(labels < UNKNOWN_LABEL) | (labels >= c)][0])
        raise DatasetFormatError("label-out-of-range",
                                 f"label {bad} outside [-1, {c})")

    image = _read_matrix(os.path.join(path, img_file), n, d, "image_features")
    text = _read_matrix(os.path.join(path, txt_file), c, d, "text_features")
    aug = None
    if files.get("image_features_aug"):
        aug = _read_matrix(os.path.join(path, str(files["image_features_aug"])),
                           n, d, "image_features_aug")

    splits = _parse_splits(manifest.get("splits", {}) or {}, n, c, labels)

    ds = EmbeddingDataset(
        n_samples=n, n_classes=c, dim=d,
        image_features=image, text_features=text,
        class_names=class_names, labels=labels,
        splits=splits, image_features_aug=aug,
    )
    return ds.freeze()


def save_dataset(ds: EmbeddingDataset, path: str,
                 notes: dict | None = None) -> None:
    """Write the bit-exact on-disk form. Features must already be unit-norm."""
    os.makedirs(path, exist_ok=True)
    files = {"image_features": "image_features.f32",
             "text_features": "text_features.f32"}
    ds.image_features.astype("<f4").tofile(os.path.join(path, files["image_features"]))
    ds.text_features.astype("<f4").tofile(os.path.join(path, files["text_features"]))
    if ds.image_features_aug is not None:
        files["image_features_aug"] = "image_features_aug.f32"
        ds.image_features_aug.astype("<f4").tofile(
            os.path.join(path, files["image_features_aug"]))
    manifest = {
        "version": FORMAT_VERSION,
        "n_samples": ds.n_samples,
        "n_classes": ds.n_classes,
        "dim": ds.dim,
        "class_names": list(ds.class_names),
        "labels": [int(x) for x in ds.labels],
        "files": files,
        "splits": ds.splits.to_manifest(),
    }
    if notes:
        manifest["notes"] = notes
    with open(os.path.join(path, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def make_trzsl_split(ds: EmbeddingDataset, seen_fraction: float,
                     seed: int) -> SplitSpec:
    """Partition classes into seen/unseen and re-split the training pool.

    ``ceil(seen_fraction * C)`` classes are marked seen via a seed-derived
    shuffle; samples of seen classes go to the labeled split, unseen-class
    samples to the unlabeled split. An existing test split is preserved.
    """
    if not 0.0 < seen_fraction < 1.0:
        raise ValidationError(f"seen_fraction must be in (0, 1), got {seen_fraction}")
    pool = np.concatenate([ds.splits.train_unlabeled, ds.splits.train_labeled])
    if not pool.size:
        mask = np.ones(ds.n_samples, dtype=bool)
        mask[ds.splits.test] = False
        pool = np.flatnonzero(mask).astype(np.int64)
    if not ds.has_labels(pool):
        raise ValidationError("TRZSL split requires labels for all training samples")

    n_seen = math.ceil(seen_fraction * ds.n_classes)
    perm = stream_rng(seed, "trzsl-split").permutation(ds.n_classes)
    seen = np.sort(perm[:n_seen]).astype(np.int64)
    unseen = np.sort(perm[n_seen:]).astype(np.int64)

    lab = ds.labels[pool]
    return SplitSpec(
        train_unlabeled=pool[np.isin(lab, unseen)],
        train_labeled=pool[np.isin(lab, seen)],
        test=ds.splits.test.copy(),
        seen_classes=seen,
        unseen_classes=unseen,
    )


def make_ssl_split(ds: EmbeddingDataset, n_labeled: int = 2,
                   seed: int = 0) -> SplitSpec:
    """Hold out ``n_labeled`` labeled samples per class from the train pool."""
    pool = np.concatenate([ds.splits.train_unlabeled, ds.splits.train_labeled])
    if not pool.size:
        mask = np.ones(ds.n_samples, dtype=bool)
        mask[ds.splits.test] = False
        pool = np.flatnonzero(mask).astype(np.int64)
    if not ds.has_labels(pool):
        raise ValidationError("SSL split requires labels for all training samples")

    rng = stream_rng(seed, "ssl-split")
    labeled: list[int] = []
    for c in range(ds.n_classes):
        members = pool[ds.labels[pool] == c]
        if members.size < n_labeled:
            raise ValidationError(
                f"class {c} has {members.size} train samples, need {n_labeled}")
        pick = rng.permutation(members.size)[:n_labeled]
        labeled.extend(int(i) for i in members[pick])
    labeled_arr = np.sort(np.asarray(labeled, dtype=np.int64))
    rest = pool[~np.isin(pool, labeled_arr)]
    return SplitSpec(
        train_unlabeled=rest,
        train_labeled=labeled_arr,
        test=ds.splits.test.copy(),
    )
