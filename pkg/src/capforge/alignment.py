"""Concept alignment: enhanced class descriptions and the initial
pseudolabel set.

Description candidates come from a pluggable provider. The file provider
reads pre-embedded candidates from JSON; the mock provider derives
embeddings from a seeded hash and exists for tests; the network provider
fetches description text from an HTTP endpoint but still requires a
companion embedding file, and never runs on the test path.
"""

import hashlib
import json
from dataclasses import dataclass, field, replace

import numpy as np

from .cluster import cosine_sim_matrix, kmeans, row_softmax
from .dataset import EmbeddingDataset
from .errors import (InsufficientCandidatesError, ProviderUnavailableError,
                     ValidationError)
from .mismatch import DEFAULT_GAMMA, MismatchReport, zero_shot_logits
from .validation import stream_seed

# query sent to the description backend, one sentence per candidate
QUERY_TEMPLATE = "Please describe the most distinguishing visual features of {}, in one sentence."


@dataclass
class DescriptionCandidate:
    class_id: int
    text: str
    embedding: np.ndarray     # unit norm, float64

    def __post_init__(self):
        emb = np.asarray(self.embedding, dtype=np.float64).ravel()
        norm = np.linalg.norm(emb)
        if norm == 0.0:
            raise ValidationError("description embedding is all zeros")
        if abs(norm - 1.0) > 1e-5:
            emb = emb / norm
        self.embedding = emb


class FileDescriptionProvider:
    """Pre-embedded candidates from a JSON array of
    ``{class_name, text, embedding}`` entries."""

    def __init__(self, path: str):
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
        self._by_name: dict[str, list[tuple[str, list[float]]]] = {}
        for entry in raw:
            self._by_name.setdefault(str(entry["class_name"]), []).append(
                (str(entry["text"]), entry["embedding"]))

    def fetch(self, class_name: str, n: int) -> list[DescriptionCandidate]:
        if n < 1:
            raise ValidationError(f"n must be >= 1, got {n}")
        have = self._by_name.get(class_name, [])
        if len(have) < n:
            raise InsufficientCandidatesError(
                f"insufficient candidates for {class_name!r}: have {len(have)}, need {n}")
        return [DescriptionCandidate(class_id=-1, text=t, embedding=e)
                for t, e in have[:n]]


class MockDescriptionProvider:
    """Deterministic stand-in: embeddings are seeded hashes of the class name."""

    def __init__(self, dim: int, seed: int = 0):
        self.dim = dim
        self.seed = seed

    def fetch(self, class_name: str, n: int) -> list[DescriptionCandidate]:
        if n < 1:
            raise ValidationError(f"n must be >= 1, got {n}")
        out = []
        for i in range(n):
            digest = hashlib.sha256(
                f"{self.seed}:{class_name}:{i}".encode("utf-8")).digest()
            rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
            emb = rng.standard_normal(self.dim)
            out.append(DescriptionCandidate(
                class_id=-1,
                text=f"mock candidate {i}: {QUERY_TEMPLATE.format(class_name)}",
                embedding=emb / np.linalg.norm(emb),
            ))
        return out


class NetworkDescriptionProvider:
    """Fetches candidate text over HTTP; embeddings must come from a
    companion file keyed by text. Optional and excluded from tests."""

    def __init__(self, endpoint: str, embedding_file: str, timeout: float = 10.0):
        self.endpoint = endpoint
        self.timeout = timeout
        with open(embedding_file, encoding="utf-8") as fh:
            raw = json.load(fh)
        self._by_text = {str(e["text"]): e["embedding"] for e in raw}

    def fetch(self, class_name: str, n: int) -> list[DescriptionCandidate]:
        if n < 1:
            raise ValidationError(f"n must be >= 1, got {n}")
        import requests

        try:
            resp = requests.post(
                self.endpoint,
                json={"prompt": QUERY_TEMPLATE.format(class_name), "n": n},
                timeout=self.timeout,
            )
            resp.raise_for_status()
            texts = [str(t) for t in resp.json()["descriptions"]]
        except Exception as exc:
            raise ProviderUnavailableError(
                f"description endpoint {self.endpoint} unavailable: {exc}") from exc
        if len(texts) < n:
            raise InsufficientCandidatesError(
                f"endpoint returned {len(texts)} descriptions, need {n}")
        out = []
        for text in texts[:n]:
            if text not in self._by_text:
                raise InsufficientCandidatesError(
                    f"no companion embedding for description {text!r}")
            out.append(DescriptionCandidate(class_id=-1, text=text,
                                            embedding=self._by_text[text]))
        return out


def fetch_candidates(provider, ds: EmbeddingDataset, class_ids,
                     n: int) -> dict[int, list[DescriptionCandidate]]:
    """Fetch ``n`` candidates per class id and tag them with the id."""
    out: dict[int, list[DescriptionCandidate]] = {}
    for c in class_ids:
        cands = provider.fetch(ds.class_names[c], n)
        out[int(c)] = [replace(cand, class_id=int(c)) for cand in cands]
    return out


def select_optimal_description(candidates: list[DescriptionCandidate],
                               i_final: np.ndarray,
                               seed: int = 0) -> DescriptionCandidate:
    """Pick the candidate most aligned with the surviving image features.

    The surviving features are clustered into one cluster per candidate;
    the candidate of the globally most confident candidate/centroid
    softmax cell wins (ties row-major, i.e. lowest candidate first).
    """
    if not candidates:
        raise ValidationError("need at least one description candidate")
    if len(candidates) == 1:
        return candidates[0]
    i_final = np.asarray(i_final, dtype=np.float64)
    if i_final.size == 0:
        raise ValidationError("i_final is empty")
    model = kmeans(i_final, len(candidates),
                   seed=stream_seed(seed, "description-select"))
    emb = np.stack([c.embedding for c in candidates])
    P = row_softmax(cosine_sim_matrix(emb, model.centroids))
    i_star, _ = np.unravel_index(int(np.argmax(P)), P.shape)
    return candidates[i_star]


SOURCE_ALIGNMENT = "alignment"
SOURCE_CONFIDENCE = "topk-confidence"
SOURCE_GROWTH = "growth"


@dataclass
class PseudolabelRecord:
    sample_id: int
    class_id: int
    confidence: float
    source: str


@dataclass
class PseudolabelSet:
    k: int
    records: list[PseudolabelRecord] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    def sample_ids(self) -> np.ndarray:
        return np.unique([r.sample_id for r in self.records]).astype(np.int64)

    def by_class(self) -> dict[int, list[PseudolabelRecord]]:
        out: dict[int, list[PseudolabelRecord]] = {}
        for r in self.records:
            out.setdefault(r.class_id, []).append(r)
        return out

    def accuracy(self, labels: np.ndarray) -> float:
        """Fraction of records matching ground-truth labels."""
        if not self.records:
            return 0.0
        hits = sum(1 for r in self.records if labels[r.sample_id] == r.class_id)
        return hits / len(self.records)

    def to_json(self) -> dict:
        return {
            "k": self.k,
            "records": [
                {"sample_id": r.sample_id, "class_id": r.class_id,
                 "confidence": r.confidence, "source": r.source}
                for r in self.records
            ],
        }

    @classmethod
    def from_json(cls, doc: dict) -> "PseudolabelSet":
        return cls(
            k=int(doc["k"]),
            records=[
                PseudolabelRecord(int(r["sample_id"]), int(r["class_id"]),
                                  float(r["confidence"]), str(r["source"]))
                for r in doc["records"]
            ],
        )


def enhance_mismatched(ds: EmbeddingDataset, report: MismatchReport,
                       provider, n: int, seed: int = 0
                       ) -> dict[int, DescriptionCandidate]:
    """One enhanced description per mismatched class: fetch ``n`` candidates
    each and keep the one best aligned with the surviving image pool."""
    if not report.y_mm:
        return {}
    candidates = fetch_candidates(provider, ds, report.y_mm, n)
    pool = ds.unlabeled_pool()
    i_final = ds.image_features[report.final_pool(pool)].astype(np.float64)
    return {
        c: select_optimal_description(candidates[c], i_final, seed=seed)
        for c in report.y_mm
    }


def build_initial_pl(ds: EmbeddingDataset, report: MismatchReport,
                     enhanced: dict[int, DescriptionCandidate], k: int,
                     gamma: float = DEFAULT_GAMMA) -> PseudolabelSet:
    """Top-k pseudolabels per class: by enhanced-description similarity for
    mismatched classes, by zero-shot confidence for the rest.

    Per-class selections are independent, so one sample may carry labels
    for two classes. Classes short on predicted samples are backfilled
    with the highest class-probability samples among the rest of the pool.
    """
    if set(enhanced) != set(report.y_mm):
        raise ValidationError(
            f"enhanced descriptions must cover exactly y_mm={report.y_mm}, "
            f"got {sorted(enhanced)}")
    pool = ds.unlabeled_pool()
    if k < 1:
        raise ValidationError(f"k must be >= 1, got {k}")
    if k > len(pool):
        raise ValidationError(f"k={k} exceeds pool size {len(pool)}")

    probs = row_softmax(zero_shot_logits(ds, gamma, pool))
    preds = np.argmax(probs, axis=1)
    X = ds.image_features[pool].astype(np.float64)

    records: list[PseudolabelRecord] = []
    for c in range(ds.n_classes):
        if c in enhanced:
            sims = X @ enhanced[c].embedding
            order = np.lexsort((pool, -sims))[:k]
            records.extend(
                PseudolabelRecord(int(pool[i]), c, float(sims[i]), SOURCE_ALIGNMENT)
                for i in order)
        else:
            is_pred = preds == c
            # predicted-c samples first, then highest class-c probability
            order = np.lexsort((pool, -probs[:, c], ~is_pred))[:k]
            records.extend(
                PseudolabelRecord(int(pool[i]), c, float(probs[i, c]),
                                  SOURCE_CONFIDENCE)
                for i in order)
    return PseudolabelSet(k=k, records=records)
