"""Synthetic embedding datasets with planted structure.

Generates unit-norm Gaussian class clusters on the sphere together with
two kinds of planted pathology:

* mismatch — a class whose text feature is replaced by a direction
  orthogonal to every class center, so zero-shot accuracy collapses while
  the image features still cluster tightly;
* confusion — a pair of classes pushed close together geometrically whose
  text features are interpolated toward one of the two, biasing zero-shot
  predictions toward that class.

Ground truth for the planted sets is returned alongside the dataset so
every pipeline stage can be scored. Generation is deterministic per
(spec, seed): identical specs yield byte-identical dataset files.
"""

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .dataset import EmbeddingDataset, SplitSpec, save_dataset
from .errors import ValidationError
from .validation import stream_rng

DESCRIPTION_TEXT = "synthetic enhanced visual description {i} for {name}"


@dataclass
class SynthSpec:
    n_classes: int = 10
    per_class: int = 60            # train samples per class
    test_per_class: int = 20
    dim: int = 32
    intra_class_std: float = 0.1
    n_mismatch: int = 0
    confusion_pairs: list[tuple[int, int, float]] = field(default_factory=list)
    aug_noise_std: float = 0.05
    seed: int = 0
    # geometry knobs; defaults keep unplanted classes well separated
    max_center_cos: float = 0.5
    confusion_cos: float = 0.92
    desc_noise_std: float = 0.05
    n_descriptions: int = 5

    def validate(self) -> None:
        if self.n_classes < 2 or self.per_class < 1 or self.dim < 2:
            raise ValidationError("need n_classes >= 2, per_class >= 1, dim >= 2")
        pair_ids = [c for a, b, _ in self.confusion_pairs for c in (a, b)]
        if len(set(pair_ids)) != len(pair_ids):
            raise ValidationError("confusion pairs must use distinct classes")
        if any(not 0 <= c < self.n_classes for c in pair_ids):
            raise ValidationError("confusion pair class out of range")
        if any(not 0.0 <= b <= 1.0 for _, _, b in self.confusion_pairs):
            raise ValidationError("confusion bias must lie in [0, 1]")
        if self.n_mismatch + 2 * len(self.confusion_pairs) > self.n_classes:
            raise ValidationError("too many planted classes for n_classes")
        if self.n_mismatch > 0 and self.dim <= self.n_classes:
            raise ValidationError(
                "mismatch planting needs dim > n_classes for an orthogonal direction")


@dataclass
class GroundTruth:
    mismatch_classes: list[int]
    confusion_pairs: list[tuple[int, int, float]]
    class_centers: np.ndarray   # (C, D) float64 unit rows
    seed: int

    def to_json(self) -> dict:
        return {
            "mismatch_classes": self.mismatch_classes,
            "confusion_pairs": [[a, b, float(x)] for a, b, x in self.confusion_pairs],
            "seed": self.seed,
        }


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v)


def _sample_centers(spec: SynthSpec, rng: np.random.Generator) -> np.ndarray:
    centers = np.empty((spec.n_classes, spec.dim))
    for c in range(spec.n_classes):
        for _ in range(1000):
            cand = _unit(rng.standard_normal(spec.dim))
            if c == 0 or np.max(np.abs(centers[:c] @ cand)) < spec.max_center_cos:
                centers[c] = cand
                break
        else:
            raise ValidationError(
                f"could not place {spec.n_classes} separated centers in dim {spec.dim}")
    return centers


def _orthogonal_direction(centers: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Random unit vector orthogonal to every class center."""
    v = rng.standard_normal(centers.shape[1])
    # Gram-Schmidt against the (possibly rank-deficient) center span
    q, _ = np.linalg.qr(centers.T)
    v = v - q @ (q.T @ v)
    n = np.linalg.norm(v)
    if n < 1e-9:
        raise ValidationError("no orthogonal direction left for mismatch planting")
    return v / n


def generate(spec: SynthSpec) -> tuple[EmbeddingDataset, GroundTruth]:
    """Build the planted dataset and its scoring ground truth."""
    spec.validate()
    C, D = spec.n_classes, spec.dim

    centers = _sample_centers(spec, stream_rng(spec.seed, "synth-centers"))

    # confusion: pull b's center near a's, keeping both on the sphere
    geo_rng = stream_rng(spec.seed, "synth-confusion")
    for a, b, _bias in spec.confusion_pairs:
        u = centers[a]
        w = centers[b] - (centers[b] @ u) * u
        if np.linalg.norm(w) < 1e-9:
            w = _orthogonal_direction(u[None, :], geo_rng)
        w = _unit(w)
        sin_part = float(np.sqrt(1.0 - spec.confusion_cos**2))
        centers[b] = spec.confusion_cos * u + sin_part * w

    # mismatch classes drawn among classes left untouched by confusion
    pair_ids = {c for a, b, _ in spec.confusion_pairs for c in (a, b)}
    eligible = np.array([c for c in range(C) if c not in pair_ids], dtype=np.int64)
    pick_rng = stream_rng(spec.seed, "synth-mismatch-pick")
    mismatch = sorted(
        int(c) for c in pick_rng.choice(eligible, size=spec.n_mismatch, replace=False)
    ) if spec.n_mismatch else []

    text = centers.copy()
    text_rng = stream_rng(spec.seed, "synth-mismatch-text")
    for c in mismatch:
        text[c] = _orthogonal_direction(centers, text_rng)
    # Confused text keeps pointing at its own class but leaks norm into an
    # off-manifold junk direction — it under-represents the distinguishing
    # feature. Past bias 0.5 the partner's exact text wins on this class's
    # samples (one-way starvation); backfill ranking stays correct because
    # the diluted text is still closest to its own center.
    for a, b, bias in spec.confusion_pairs:
        cos_b = max(0.0, 1.0 - 2.0 * bias * (1.0 - spec.confusion_cos))
        junk = _orthogonal_direction(centers, text_rng)
        text[b] = cos_b * centers[b] + float(np.sqrt(1.0 - cos_b**2)) * junk

    n_train = C * spec.per_class
    n_test = C * spec.test_per_class
    n = n_train + n_test
    labels = np.concatenate([
        np.repeat(np.arange(C), spec.per_class),
        np.repeat(np.arange(C), spec.test_per_class),
    ]).astype(np.int64)

    samp_rng = stream_rng(spec.seed, "synth-samples")
    X = centers[labels] + spec.intra_class_std * samp_rng.standard_normal((n, D))
    X /= np.linalg.norm(X, axis=1, keepdims=True)

    aug_rng = stream_rng(spec.seed, "synth-augment")
    X_aug = X + spec.aug_noise_std * aug_rng.standard_normal((n, D))
    X_aug /= np.linalg.norm(X_aug, axis=1, keepdims=True)

    splits = SplitSpec(
        train_unlabeled=np.arange(n_train, dtype=np.int64),
        test=np.arange(n_train, n, dtype=np.int64),
    )
    ds = EmbeddingDataset(
        n_samples=n, n_classes=C, dim=D,
        image_features=X.astype(np.float32),
        text_features=text.astype(np.float32),
        class_names=[f"class_{c:03d}" for c in range(C)],
        labels=labels,
        splits=splits,
        image_features_aug=X_aug.astype(np.float32),
    ).freeze()
    gt = GroundTruth(mismatch_classes=list(mismatch),
                     confusion_pairs=list(spec.confusion_pairs),
                     class_centers=centers, seed=spec.seed)
    return ds, gt


def make_descriptions(ds: EmbeddingDataset, gt: GroundTruth,
                      spec: SynthSpec) -> list[dict]:
    """Candidate description entries for every class.

    Each candidate embedding is the true class center plus small noise,
    standing in for a good externally generated description. Covering all
    classes (not only planted ones) lets the pipeline fetch candidates for
    any class the detector flags.
    """
    rng = stream_rng(spec.seed, "synth-descriptions")
    entries = []
    for c, name in enumerate(ds.class_names):
        for i in range(spec.n_descriptions):
            emb = _unit(gt.class_centers[c]
                        + spec.desc_noise_std * rng.standard_normal(spec.dim))
            entries.append({
                "class_name": name,
                "text": DESCRIPTION_TEXT.format(i=i, name=name),
                "embedding": [float(np.float32(x)) for x in emb],
            })
    return entries


def write_synth_dataset(spec: SynthSpec, out_dir: str) -> tuple[EmbeddingDataset, GroundTruth]:
    """Generate and persist dataset + ground_truth.json + descriptions.json."""
    ds, gt = generate(spec)
    save_dataset(ds, out_dir)
    with open(os.path.join(out_dir, "ground_truth.json"), "w", encoding="utf-8") as fh:
        json.dump(gt.to_json(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(os.path.join(out_dir, "descriptions.json"), "w", encoding="utf-8") as fh:
        json.dump(make_descriptions(ds, gt, spec), fh, indent=2, sort_keys=True)
        fh.write("\n")
    return ds, gt
