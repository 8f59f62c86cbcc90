"""Evaluation metrics: accuracy and balance statistics, seen/unseen
harmonic mean, per-class cluster concentration, confused-group discovery
over a class-similarity matrix, local ECE, and confidence histograms.

Everything here is pure over immutable model/dataset snapshots; the CLI
turns the dict forms into JSON and CSV artifacts.
"""

import warnings
from dataclasses import dataclass

import numpy as np

from .adapters import AdapterModel, forward_logits
from .cluster import kmeans, row_softmax
from .dataset import EmbeddingDataset
from .errors import ValidationError
from .validation import stream_seed

DEFAULT_THETA_G = 0.85
DEFAULT_ECE_BINS = 15


def harmonic_mean(a_seen: float, a_unseen: float) -> float:
    """2ab/(a+b); 0 when both accuracies are 0."""
    if a_seen < 0.0 or a_unseen < 0.0:
        raise ValidationError("accuracies must be nonnegative")
    total = a_seen + a_unseen
    if total == 0.0:
        return 0.0
    return 2.0 * a_seen * a_unseen / total


@dataclass
class EvalReport:
    overall_acc: float
    per_class_acc: list
    min_per_class_acc: float
    pred_counts: list
    pred_count_std: float
    imbalance_ratio: float
    n_test: int
    seen_acc: float | None = None
    unseen_acc: float | None = None
    harmonic_mean: float | None = None
    cluster_concentration: list | None = None
    confused_groups: list | None = None
    local_ece: list | None = None
    confidence_histogram: list | None = None

    def to_json(self) -> dict:
        return {
            "overall_acc": self.overall_acc,
            "per_class_acc": self.per_class_acc,
            "min_per_class_acc": self.min_per_class_acc,
            "pred_counts": self.pred_counts,
            "pred_count_std": self.pred_count_std,
            "imbalance_ratio": self.imbalance_ratio,
            "n_test": self.n_test,
            "seen_acc": self.seen_acc,
            "unseen_acc": self.unseen_acc,
            "harmonic_mean": self.harmonic_mean,
            "cluster_concentration": self.cluster_concentration,
            "confused_groups": self.confused_groups,
            "local_ece": self.local_ece,
            "confidence_histogram": self.confidence_histogram,
        }


def _test_predictions(model: AdapterModel, ds: EmbeddingDataset):
    """Inference-branch predictions over the test split."""
    test_idx = ds.splits.test
    if len(test_idx) == 0:
        raise ValidationError("dataset has no test split")
    if not ds.has_labels() or np.any(ds.labels[test_idx] < 0):
        raise ValidationError("test labels required for evaluation")
    X = ds.image_features[test_idx].astype(np.float64)
    probs = row_softmax(forward_logits(model, X, ds.text_features, "inference"))
    preds = np.argmax(probs, axis=1)
    confs = probs[np.arange(len(preds)), preds]
    return test_idx, ds.labels[test_idx], preds, confs


def accuracy_report(model: AdapterModel, ds: EmbeddingDataset) -> EvalReport:
    """Accuracy, balance, and (when the dataset declares a seen/unseen
    class split) the seen/unseen harmonic mean."""
    _, labels, preds, _ = _test_predictions(model, ds)
    C = ds.n_classes
    overall = float(np.mean(preds == labels))

    per_class = np.zeros(C)
    present = np.zeros(C, dtype=bool)
    for c in range(C):
        idx = np.flatnonzero(labels == c)
        if len(idx):
            present[c] = True
            per_class[c] = float(np.mean(preds[idx] == c))
    min_acc = float(per_class[present].min()) if present.any() else 0.0

    counts = np.bincount(preds, minlength=C)
    nonzero = counts[counts > 0]
    ratio = float(nonzero.max() / nonzero.min()) if len(nonzero) else 0.0

    report = EvalReport(
        overall_acc=overall,
        per_class_acc=per_class.tolist(),
        min_per_class_acc=min_acc,
        pred_counts=counts.tolist(),
        pred_count_std=float(np.std(counts)),
        imbalance_ratio=ratio,
        n_test=len(labels),
    )

    seen, unseen = ds.splits.seen_classes, ds.splits.unseen_classes
    if seen is not None and unseen is not None and len(seen) and len(unseen):
        seen_mask = np.isin(labels, seen)
        unseen_mask = np.isin(labels, unseen)
        a_s = float(np.mean(preds[seen_mask] == labels[seen_mask])) if seen_mask.any() else 0.0
        a_u = float(np.mean(preds[unseen_mask] == labels[unseen_mask])) if unseen_mask.any() else 0.0
        report.seen_acc = a_s
        report.unseen_acc = a_u
        report.harmonic_mean = harmonic_mean(a_s, a_u)
    return report


def cluster_concentration(ds: EmbeddingDataset, k: int | None = None,
                          seed: int = 0) -> np.ndarray:
    """Fraction of each class's samples landing in the class's most
    common cluster under k-means (k defaults to the class count)."""
    if not ds.has_labels():
        raise ValidationError("labels required for cluster concentration")
    mask = ds.labels >= 0
    X = ds.image_features[mask].astype(np.float64)
    y = ds.labels[mask]
    k = int(k) if k is not None else ds.n_classes
    cm = kmeans(X, k, seed=stream_seed(seed, "concentration"))
    out = np.zeros(ds.n_classes)
    for c in range(ds.n_classes):
        idx = np.flatnonzero(y == c)
        if len(idx) == 0:
            continue
        tally = np.bincount(cm.assignments[idx], minlength=k)
        out[c] = tally.max() / len(idx)
    return out


def find_confused_groups(S: np.ndarray,
                         theta_g: float = DEFAULT_THETA_G) -> list[list[int]]:
    """Connected components (size >= 2) of the graph with an edge wherever
    off-diagonal class similarity reaches ``theta_g``."""
    S = np.asarray(S, dtype=np.float64)
    if S.ndim != 2 or S.shape[0] != S.shape[1]:
        raise ValidationError("similarity matrix must be square")
    C = S.shape[0]
    adj = (S >= theta_g)
    np.fill_diagonal(adj, False)
    seen = np.zeros(C, dtype=bool)
    groups = []
    for start in range(C):
        if seen[start]:
            continue
        stack, comp = [start], []
        seen[start] = True
        while stack:
            node = stack.pop()
            comp.append(node)
            for nb in np.flatnonzero(adj[node]):
                if not seen[nb]:
                    seen[nb] = True
                    stack.append(int(nb))
        if len(comp) >= 2:
            groups.append(sorted(comp))
    groups.sort()
    return groups


def local_ece(model: AdapterModel, ds: EmbeddingDataset, group,
              bins: int = DEFAULT_ECE_BINS) -> float:
    """Expected calibration error over test samples whose *predicted*
    label falls in ``group``, with equal-width confidence bins.

    No samples in the group is defined as 0 (with a warning).
    """
    group = sorted(int(c) for c in group)
    if not group:
        raise ValidationError("group must be nonempty")
    if bins < 1:
        raise ValidationError("bins must be >= 1")
    _, labels, preds, confs = _test_predictions(model, ds)
    mask = np.isin(preds, group)
    n = int(mask.sum())
    if n == 0:
        warnings.warn(f"no test predictions in group {group}; ECE defined as 0")
        return 0.0
    correct = (preds[mask] == labels[mask]).astype(np.float64)
    conf = confs[mask]
    bin_idx = np.minimum((conf * bins).astype(int), bins - 1)
    ece = 0.0
    for b in range(bins):
        in_bin = bin_idx == b
        nb = int(in_bin.sum())
        if nb == 0:
            continue
        ece += (nb / n) * abs(float(correct[in_bin].mean()) - float(conf[in_bin].mean()))
    return float(ece)


def confidence_density(model: AdapterModel, ds: EmbeddingDataset, group,
                       bins: int = DEFAULT_ECE_BINS) -> dict:
    """Histogram of prediction confidence inside a class group, split by
    correctness. CSV-ready: parallel lists over bins."""
    group = sorted(int(c) for c in group)
    if not group:
        raise ValidationError("group must be nonempty")
    _, labels, preds, confs = _test_predictions(model, ds)
    edges = np.linspace(0.0, 1.0, bins + 1)
    mask = np.isin(preds, group)
    correct_mask = mask & (preds == labels)
    wrong_mask = mask & (preds != labels)
    hist_c, _ = np.histogram(confs[correct_mask], bins=edges)
    hist_w, _ = np.histogram(confs[wrong_mask], bins=edges)
    return {
        "group": group,
        "bin_edges": edges.tolist(),
        "correct": hist_c.astype(int).tolist(),
        "incorrect": hist_w.astype(int).tolist(),
    }


def full_report(model: AdapterModel, ds: EmbeddingDataset,
                sim_matrix: np.ndarray | None = None,
                theta_g: float = DEFAULT_THETA_G,
                bins: int = DEFAULT_ECE_BINS, seed: int = 0) -> EvalReport:
    """Complete EvalReport: accuracy fields plus cluster concentration and,
    when a class-similarity matrix is supplied, confused-group diagnostics."""
    report = accuracy_report(model, ds)
    report.cluster_concentration = cluster_concentration(ds, seed=seed).tolist()
    if sim_matrix is not None:
        groups = find_confused_groups(sim_matrix, theta_g)
        report.confused_groups = groups
        ece_entries, hist_entries = [], []
        for g in groups:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                ece = local_ece(model, ds, g, bins=bins)
            ece_entries.append({"group": g, "ece": ece})
            hist_entries.append(confidence_density(model, ds, g, bins=bins))
        report.local_ece = ece_entries
        report.confidence_histogram = hist_entries
    return report
