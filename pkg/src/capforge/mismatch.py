"""Concept-mismatch detection via iterative clustering.

Each round clusters the remaining image features into as many clusters as
there are remaining classes, softmaxes the class/centroid similarity
matrix, and retires the best-aligned class together with (a bounded
number of) the samples backing it. Classes that survive to the end and
also sit among the classes with the fewest zero-shot predictions are the
mismatch set.
"""

import json
import math
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .cluster import cosine_sim_matrix, kmeans, row_softmax
from .dataset import EmbeddingDataset
from .errors import ValidationError
from .validation import stream_seed

DEFAULT_GAMMA = 100.0


def zero_shot_logits(ds: EmbeddingDataset, gamma: float = DEFAULT_GAMMA,
                     indices=None) -> np.ndarray:
    """Temperature-scaled cosine logits of every sample against every class."""
    X = ds.image_features if indices is None else ds.image_features[indices]
    return gamma * (X.astype(np.float64) @ ds.text_features.astype(np.float64).T)


def zero_shot_predict(ds: EmbeddingDataset, gamma: float = DEFAULT_GAMMA,
                      indices=None) -> tuple[np.ndarray, np.ndarray]:
    """Argmax class and max-softmax confidence per sample.

    Ties go to the lower class index (first argmax occurrence).
    """
    probs = row_softmax(zero_shot_logits(ds, gamma, indices))
    preds = np.argmax(probs, axis=1)
    confs = probs[np.arange(len(preds)), preds]
    return preds, confs


def auto_threshold(n_classes: int) -> int:
    """Default detection threshold: one tenth of the class count, rounded up."""
    return max(1, math.ceil(n_classes / 10))


@dataclass
class IterationRecord:
    removed_class: int
    confidence: float
    removal_cap: int                 # s for this iteration
    removed_samples: list[int] = field(default_factory=list)


@dataclass
class MismatchReport:
    t: int
    y_final: list[int]
    y_low_t: list[int]
    y_mm: list[int]
    trace: list[IterationRecord]

    def removed_sample_ids(self) -> np.ndarray:
        ids = [s for rec in self.trace for s in rec.removed_samples]
        return np.asarray(sorted(ids), dtype=np.int64)

    def final_pool(self, pool: np.ndarray) -> np.ndarray:
        """Sample ids that survived all removal rounds."""
        return pool[~np.isin(pool, self.removed_sample_ids())]

    def to_json(self, class_names: list[str] | None = None) -> dict:
        doc = {
            "t": self.t,
            "y_final": self.y_final,
            "y_low_t": self.y_low_t,
            "y_mm": self.y_mm,
            "trace": [
                {
                    "removed_class": rec.removed_class,
                    "confidence": rec.confidence,
                    "removal_cap": rec.removal_cap,
                    "removed_samples": rec.removed_samples,
                }
                for rec in self.trace
            ],
        }
        if class_names is not None:
            doc["y_mm_names"] = [class_names[c] for c in self.y_mm]
            for entry, rec in zip(doc["trace"], self.trace):
                entry["removed_class_name"] = class_names[rec.removed_class]
        return doc

    @classmethod
    def from_json(cls, doc: dict) -> "MismatchReport":
        return cls(
            t=int(doc["t"]),
            y_final=[int(c) for c in doc["y_final"]],
            y_low_t=[int(c) for c in doc["y_low_t"]],
            y_mm=[int(c) for c in doc["y_mm"]],
            trace=[
                IterationRecord(
                    removed_class=int(r["removed_class"]),
                    confidence=float(r["confidence"]),
                    removal_cap=int(r["removal_cap"]),
                    removed_samples=[int(s) for s in r["removed_samples"]],
                )
                for r in doc["trace"]
            ],
        )


def detect_mismatch(ds: EmbeddingDataset, t: int, seed: int = 0,
                    gamma: float = DEFAULT_GAMMA) -> MismatchReport:
    """Run the iterative detection loop until fewer than ``t`` classes remain.

    Zero-shot predictions are computed once against the full class set and
    held fixed; they drive both the per-round sample removal (top-s most
    confident samples predicted as the retiring class, s = floor of the
    mean remaining-samples-per-class) and the final fewest-predictions
    set. Deterministic for fixed (dataset, t, seed).
    """
    C = ds.n_classes
    if not 1 <= t <= C:
        raise ValidationError(f"t must lie in [1, {C}], got {t}")

    pool = ds.unlabeled_pool()
    preds, confs = zero_shot_predict(ds, gamma, pool)

    remaining_classes = list(range(C))
    alive = np.ones(len(pool), dtype=bool)
    trace: list[IterationRecord] = []

    it = 0
    while len(remaining_classes) >= t:
        pos = np.flatnonzero(alive)               # positions into pool
        k = len(remaining_classes)
        model = kmeans(ds.image_features[pool[pos]], k,
                       seed=stream_seed(seed, f"detect-iter-{it}"))
        S = cosine_sim_matrix(ds.text_features[remaining_classes], model.centroids)
        P = row_softmax(S)
        i_star, j_star = np.unravel_index(int(np.argmax(P)), P.shape)
        class_star = remaining_classes[i_star]

        cluster_pos = pos[model.assignments == j_star]
        inter = cluster_pos[preds[cluster_pos] == class_star]
        s = len(pos) // k
        order = np.lexsort((pool[inter], -confs[inter]))
        drop = inter[order[:s]]
        alive[drop] = False

        trace.append(IterationRecord(
            removed_class=int(class_star),
            confidence=float(P[i_star, j_star]),
            removal_cap=int(s),
            removed_samples=[int(i) for i in pool[drop]],
        ))
        remaining_classes.pop(i_star)
        it += 1

    counts = np.bincount(preds, minlength=C)
    low_order = np.lexsort((np.arange(C), counts))
    y_low_t = sorted(int(c) for c in low_order[:t])
    y_final = sorted(remaining_classes)
    y_mm = sorted(set(y_final) & set(y_low_t))
    return MismatchReport(t=t, y_final=y_final, y_low_t=y_low_t,
                          y_mm=y_mm, trace=trace)


class MismatchDetector(BaseEstimator):
    """Estimator wrapper: ``fit(dataset)`` runs detection and stores the report.

    ``t=None`` applies the default rule (ceil of a tenth of the classes).
    """

    def __init__(self, t: int | None = None, seed: int = 0,
                 gamma: float = DEFAULT_GAMMA):
        self.t = t
        self.seed = seed
        self.gamma = gamma

    def fit(self, dataset: EmbeddingDataset, y=None):
        t = self.t if self.t is not None else auto_threshold(dataset.n_classes)
        self.report_ = detect_mismatch(dataset, t, seed=self.seed, gamma=self.gamma)
        self.y_mm_ = self.report_.y_mm
        self.y_final_ = self.report_.y_final
        self.y_low_t_ = self.report_.y_low_t
        return self

    def save_report(self, path: str, class_names: list[str] | None = None,
                    extra: dict | None = None) -> None:
        check_is_fitted(self, "report_")
        doc = self.report_.to_json(class_names)
        if extra:
            doc.update(extra)
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(doc, fh, indent=2, sort_keys=True)
            fh.write("\n")
