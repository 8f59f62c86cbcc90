"""Dual-branch fine-tuning loop over precomputed embeddings.

Each epoch refreshes the margin state from the current pseudolabel set,
runs SGD over three loss terms (pseudolabel batches through the main
branch, confident unlabeled samples' augmented views through the pseudo
branch, and — outside the fully-unlabeled paradigm — labeled batches
through the main branch), and every ``growth_every`` epochs promotes the
most confident unlabeled predictions into the pseudolabel set.

The metric log is a list of per-epoch dicts that serializes to JSON
lines deterministically (sorted keys, no timestamps): a fixed seed must
reproduce it byte for byte.
"""

import json
import math
from dataclasses import asdict, dataclass

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin

from .adapters import (AdapterModel, SGDMomentum, forward_logits, image_embed,
                       loss_and_grads, text_embed)
from .alignment import (SOURCE_GROWTH, MockDescriptionProvider, PseudolabelRecord,
                        PseudolabelSet, build_initial_pl, enhance_mismatched)
from .cluster import l2_normalize, row_softmax
from .dataset import EmbeddingDataset
from .errors import DivergenceError, ValidationError
from .margin import MarginState, build_margin_state
from .metrics import harmonic_mean
from .mismatch import (DEFAULT_GAMMA, MismatchReport, auto_threshold,
                       detect_mismatch)
from .validation import stream_rng

PARADIGMS = ("ul", "ssl", "trzsl")

# Named hyperparameter presets; "fine-grained" suits datasets of many
# visually close classes, where a lower confidence threshold keeps the
# unlabeled loss from starving.
PRESETS: dict[str, dict] = {
    "default": {},
    "fine-grained": {"tau": 0.5},
}


@dataclass
class TrainConfig:
    paradigm: str = "ul"
    epochs: int = 50
    batch_size: int = 32
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 0.1
    tau: float = 0.85
    k: int = 16
    margin_scale: float = 12.0
    growth_every: int = 5
    gamma: float = DEFAULT_GAMMA
    aug_noise_std: float = 0.05
    seed: int = 0

    @classmethod
    def preset(cls, name: str = "default", **overrides) -> "TrainConfig":
        if name not in PRESETS:
            raise ValidationError(
                f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
        params = dict(PRESETS[name])
        params.update(overrides)
        return cls(**params)

    def validate(self) -> None:
        if self.paradigm not in PARADIGMS:
            raise ValidationError(
                f"paradigm must be one of {PARADIGMS}, got {self.paradigm!r}")
        if self.epochs < 0:
            raise ValidationError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ValidationError("batch_size must be >= 1")
        if not 0.0 <= self.tau <= 1.0:
            raise ValidationError("tau must lie in [0, 1]")
        if self.k < 1:
            raise ValidationError("k must be >= 1")
        if self.margin_scale < 0.0:
            raise ValidationError("margin_scale must be >= 0")
        if self.growth_every < 1:
            raise ValidationError("growth_every must be >= 1")
        if self.lr < 0.0 or self.momentum < 0.0 or self.weight_decay < 0.0:
            raise ValidationError("lr, momentum, weight_decay must be >= 0")
        if self.gamma <= 0.0:
            raise ValidationError("gamma must be positive")

    def to_json(self) -> dict:
        return asdict(self)


def learning_rate(config: TrainConfig, epoch: int, step: int,
                  steps_in_epoch: int) -> float:
    """Per-step LR: linear ramp across epoch 1, then per-epoch cosine decay
    from the full rate toward zero over the remaining epochs."""
    if epoch <= 1:
        return config.lr * (step + 1) / max(1, steps_in_epoch)
    t = epoch - 2
    horizon = max(1, config.epochs - 1)
    return config.lr * 0.5 * (1.0 + math.cos(math.pi * t / horizon))


def augmented_view(ds: EmbeddingDataset, noise_std: float,
                   seed: int) -> np.ndarray:
    """The dataset's precomputed augmented features when present; otherwise
    a seeded Gaussian perturbation of the clean features, re-normalized."""
    if ds.image_features_aug is not None:
        return ds.image_features_aug.astype(np.float64)
    rng = stream_rng(seed, "augment")
    noisy = ds.image_features.astype(np.float64)
    noisy = noisy + noise_std * rng.standard_normal(noisy.shape)
    return l2_normalize(noisy)


def fixmatch_select(model: AdapterModel, X: np.ndarray,
                    text_features: np.ndarray, tau: float):
    """Main-branch predictions on clean views; keep those whose softmax
    confidence clears ``tau``. Returns (keep mask, argmax labels, confidences)."""
    if not 0.0 <= tau <= 1.0:
        raise ValidationError("tau must lie in [0, 1]")
    probs = row_softmax(forward_logits(model, X, text_features, "main"))
    preds = np.argmax(probs, axis=1)
    confs = probs[np.arange(len(preds)), preds]
    return confs >= tau, preds, confs


def refresh_margin(model: AdapterModel, ds: EmbeddingDataset,
                   pl: PseudolabelSet, config: TrainConfig) -> MarginState:
    """Per-epoch margin snapshot from the current pseudolabel set: class
    prototypes and prediction-tendency counts under the main branch."""
    ids = np.array([r.sample_id for r in pl.records], dtype=np.int64)
    feats = image_embed(model, ds.image_features[ids].astype(np.float64), "main")
    T = text_embed(model, ds.text_features, training=True)
    probs = row_softmax(model.gamma * (feats @ T.T))
    preds = np.argmax(probs, axis=1)
    confs = probs[np.arange(len(preds)), preds]

    features_by_class: dict[int, np.ndarray] = {}
    for c in range(ds.n_classes):
        rows = [i for i, r in enumerate(pl.records) if r.class_id == c]
        features_by_class[c] = feats[rows]
    return build_margin_state(features_by_class, T, list(zip(preds, confs)),
                              config.tau, ds.n_classes, config.margin_scale)


def _merge_grads(total: dict, grads: dict) -> None:
    for name, g in grads.items():
        if name in total:
            total[name] = total[name] + g
        else:
            total[name] = g


def _cycled(order: np.ndarray, start: int, count: int) -> np.ndarray:
    """``count`` positions from a shuffled index vector, wrapping around."""
    n = len(order)
    if n == 0 or count == 0:
        return np.empty(0, dtype=np.int64)
    pos = (start + np.arange(count)) % n
    return order[pos]


def train_epoch(model: AdapterModel, optimizer: SGDMomentum,
                ds: EmbeddingDataset, aug_features: np.ndarray,
                pl: PseudolabelSet, ul_pool: np.ndarray,
                labeled_ids: np.ndarray, margin_state: MarginState,
                config: TrainConfig, epoch: int) -> dict:
    """One pass over the pseudolabel set, updating the model in place."""
    records = pl.records
    if not records:
        raise ValidationError("pseudolabel set is empty")
    b = config.batch_size
    n_steps = math.ceil(len(records) / b)
    rng = stream_rng(config.seed, f"epoch-{epoch}")
    order = rng.permutation(len(records))
    ul_order = rng.permutation(len(ul_pool)) if len(ul_pool) else np.empty(0, dtype=np.int64)
    use_labeled = config.paradigm != "ul" and len(labeled_ids) > 0
    lab_order = rng.permutation(len(labeled_ids)) if use_labeled else np.empty(0, dtype=np.int64)

    M = margin_state.margin
    text = ds.text_features
    sum_pl = sum_ul = sum_l = 0.0
    n_confident = 0
    lr = 0.0
    for step in range(n_steps):
        grads: dict[str, np.ndarray] = {}
        batch = [records[i] for i in order[step * b:(step + 1) * b]]
        ids = np.array([r.sample_id for r in batch], dtype=np.int64)
        ys = np.array([r.class_id for r in batch], dtype=np.int64)
        loss_pl, g = loss_and_grads(
            model, ds.image_features[ids].astype(np.float64), ys, text, M, "main")
        _merge_grads(grads, g)

        loss_ul = 0.0
        if len(ul_pool):
            ul_ids = ul_pool[_cycled(ul_order, step * b, min(b, len(ul_pool)))]
            clean = ds.image_features[ul_ids].astype(np.float64)
            keep, yhat, _ = fixmatch_select(model, clean, text, config.tau)
            n_confident += int(keep.sum())
            if keep.any():
                loss_ul, g = loss_and_grads(
                    model, aug_features[ul_ids[keep]], yhat[keep], text, M, "pseudo")
                _merge_grads(grads, g)

        loss_l = 0.0
        if use_labeled:
            lab_ids = labeled_ids[_cycled(lab_order, step * b, min(b, len(labeled_ids)))]
            loss_l, g = loss_and_grads(
                model, ds.image_features[lab_ids].astype(np.float64),
                ds.labels[lab_ids], text, M, "main")
            _merge_grads(grads, g)

        total = loss_pl + loss_ul + loss_l
        if not math.isfinite(total):
            raise DivergenceError(f"loss became non-finite at epoch {epoch}")
        lr = learning_rate(config, epoch, step, n_steps)
        optimizer.step(grads, lr)
        sum_pl += loss_pl
        sum_ul += loss_ul
        sum_l += loss_l

    return {
        "loss_pl": sum_pl / n_steps,
        "loss_ul": sum_ul / n_steps,
        "loss_l": sum_l / n_steps,
        "loss": (sum_pl + sum_ul + sum_l) / n_steps,
        "n_confident": n_confident,
        "lr": lr,
        "steps": n_steps,
    }


def grow_pl(model: AdapterModel, ds: EmbeddingDataset, pl: PseudolabelSet,
            ul_pool: np.ndarray, epoch: int, config: TrainConfig,
            ul0_size: int) -> tuple[PseudolabelSet, np.ndarray, int]:
    """Promote, per class, the most confidently predicted remaining
    unlabeled samples into the pseudolabel set (they leave the pool).

    The per-class quota is fixed from the pool size at training start:
    floor(initial pool / (number of growth events * classes)).
    """
    if epoch % config.growth_every != 0:
        raise ValidationError(
            f"growth called at epoch {epoch}, not a multiple of {config.growth_every}")
    C = ds.n_classes
    t_g = max(1, config.epochs // config.growth_every)
    quota = ul0_size // (t_g * C)
    if quota == 0 or len(ul_pool) == 0:
        return pl, ul_pool, 0

    probs = row_softmax(forward_logits(
        model, ds.image_features[ul_pool].astype(np.float64), ds.text_features, "main"))
    preds = np.argmax(probs, axis=1)
    confs = probs[np.arange(len(preds)), preds]

    new_records: list[PseudolabelRecord] = []
    moved: list[int] = []
    for c in range(C):
        cand = np.flatnonzero(preds == c)
        if len(cand) == 0:
            continue
        ranked = cand[np.lexsort((ul_pool[cand], -confs[cand]))][:quota]
        for p in ranked:
            new_records.append(PseudolabelRecord(int(ul_pool[p]), c,
                                                 float(confs[p]), SOURCE_GROWTH))
        moved.extend(int(ul_pool[p]) for p in ranked)

    grown = PseudolabelSet(pl.k, pl.records + new_records)
    keep = ~np.isin(ul_pool, np.array(moved, dtype=np.int64))
    return grown, ul_pool[keep], len(new_records)


def _snapshot(model: AdapterModel, ds: EmbeddingDataset, pl: PseudolabelSet,
              ul_pool: np.ndarray, paradigm: str) -> dict:
    """Deterministic evaluation fields for one metric-log record."""
    record: dict = {"pl_size": len(pl.records), "ul_size": int(len(ul_pool))}
    eval_idx = ds.splits.test if len(ds.splits.test) else ds.unlabeled_pool()
    if len(eval_idx):
        probs = row_softmax(forward_logits(
            model, ds.image_features[eval_idx].astype(np.float64),
            ds.text_features, "inference"))
        preds = np.argmax(probs, axis=1)
        record["pred_counts"] = np.bincount(preds, minlength=ds.n_classes).tolist()
        if ds.has_labels() and not np.any(ds.labels[eval_idx] < 0):
            truth = ds.labels[eval_idx]
            record["test_accuracy"] = float(np.mean(preds == truth))
            seen, unseen = ds.splits.seen_classes, ds.splits.unseen_classes
            if paradigm == "trzsl" and seen is not None and unseen is not None:
                sm, um = np.isin(truth, seen), np.isin(truth, unseen)
                a_s = float(np.mean(preds[sm] == truth[sm])) if sm.any() else 0.0
                a_u = float(np.mean(preds[um] == truth[um])) if um.any() else 0.0
                record["seen_accuracy"] = a_s
                record["unseen_accuracy"] = a_u
                record["harmonic_mean"] = harmonic_mean(a_s, a_u)
    if ds.has_labels():
        record["pl_accuracy"] = pl.accuracy(ds.labels)
    return record


def run_training(ds: EmbeddingDataset, report: MismatchReport | None,
                 pl_set: PseudolabelSet, config: TrainConfig,
                 log_path: str | None = None
                 ) -> tuple[AdapterModel, list[dict]]:
    """Full loop: margin refresh, epoch of SGD, periodic pseudolabel growth.

    Returns the trained model and the per-epoch metric log (record 0 is
    the untrained, zero-shot-equivalent state). The caller's pseudolabel
    set is not mutated.
    """
    config.validate()
    if not pl_set.records:
        raise ValidationError("initial pseudolabel set is empty")
    labeled_ids = np.empty(0, dtype=np.int64)
    if config.paradigm in ("ssl", "trzsl"):
        if ds.splits.train_labeled is None or len(ds.splits.train_labeled) == 0:
            raise ValidationError(
                f"paradigm {config.paradigm!r} needs a labeled train split")
        labeled_ids = ds.splits.train_labeled
        if np.any(ds.labels[labeled_ids] < 0):
            raise ValidationError("labeled split contains unknown labels")

    pl = PseudolabelSet(pl_set.k, list(pl_set.records))
    pool = ds.unlabeled_pool()
    ul_pool = pool[~np.isin(pool, pl.sample_ids())]
    ul0_size = len(ul_pool)

    model = AdapterModel.init(ds.dim, config.gamma)
    optimizer = SGDMomentum(model, config.momentum, config.weight_decay)
    aug = augmented_view(ds, config.aug_noise_std, config.seed)

    first = {"epoch": 0, "y_mm": report.y_mm if report is not None else []}
    first.update(_snapshot(model, ds, pl, ul_pool, config.paradigm))
    log = [first]
    for epoch in range(1, config.epochs + 1):
        state = refresh_margin(model, ds, pl, config)
        stats = train_epoch(model, optimizer, ds, aug, pl, ul_pool,
                            labeled_ids, state, config, epoch)
        grown = 0
        if epoch % config.growth_every == 0:
            pl, ul_pool, grown = grow_pl(model, ds, pl, ul_pool, epoch,
                                         config, ul0_size)
        record = {"epoch": epoch, "grown": grown,
                  "big_delta": state.big_delta}
        record.update(stats)
        record.update(_snapshot(model, ds, pl, ul_pool, config.paradigm))
        log.append(record)

    if log_path is not None:
        write_metric_log(log, log_path)
    return model, log


def write_metric_log(log: list[dict], path: str) -> None:
    """JSON lines, sorted keys, newline-terminated — byte-reproducible."""
    with open(path, "w", encoding="utf-8") as fh:
        for record in log:
            fh.write(json.dumps(record, sort_keys=True))
            fh.write("\n")


class CapClassifier(BaseEstimator, ClassifierMixin):
    """End-to-end estimator: mismatch detection, description alignment,
    initial pseudolabels, then adapter fine-tuning.

    Parameters mirror TrainConfig plus the detection threshold ``t``
    (None → ceil(C/10)), the candidate count ``n_descriptions``, and a
    description ``provider`` (None → deterministic mock embeddings).
    ``fit`` takes an EmbeddingDataset; ``predict`` takes embedding rows.
    """

    def __init__(self, paradigm="ul", epochs=50, batch_size=32, lr=0.01,
                 momentum=0.9, weight_decay=0.1, tau=0.85, k=16,
                 margin_scale=12.0, growth_every=5, gamma=DEFAULT_GAMMA,
                 aug_noise_std=0.05, seed=0, t=None, n_descriptions=5,
                 provider=None):
        self.paradigm = paradigm
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.tau = tau
        self.k = k
        self.margin_scale = margin_scale
        self.growth_every = growth_every
        self.gamma = gamma
        self.aug_noise_std = aug_noise_std
        self.seed = seed
        self.t = t
        self.n_descriptions = n_descriptions
        self.provider = provider

    def _config(self) -> TrainConfig:
        return TrainConfig(
            paradigm=self.paradigm, epochs=self.epochs,
            batch_size=self.batch_size, lr=self.lr, momentum=self.momentum,
            weight_decay=self.weight_decay, tau=self.tau, k=self.k,
            margin_scale=self.margin_scale, growth_every=self.growth_every,
            gamma=self.gamma, aug_noise_std=self.aug_noise_std, seed=self.seed)

    def fit(self, dataset: EmbeddingDataset, y=None):
        config = self._config()
        config.validate()
        t = self.t if self.t is not None else auto_threshold(dataset.n_classes)
        self.report_ = detect_mismatch(dataset, t=t, seed=self.seed,
                                       gamma=self.gamma)
        provider = self.provider
        if provider is None:
            provider = MockDescriptionProvider(dataset.dim, seed=self.seed)
        enhanced = enhance_mismatched(dataset, self.report_, provider,
                                      self.n_descriptions, seed=self.seed)
        self.pl_ = build_initial_pl(dataset, self.report_, enhanced, self.k,
                                    gamma=self.gamma)
        self.model_, self.log_ = run_training(dataset, self.report_, self.pl_,
                                              config)
        self.n_classes_ = dataset.n_classes
        self.text_features_ = dataset.text_features.copy()
        return self

    def _check_ready(self):
        if not hasattr(self, "model_"):
            raise ValidationError("classifier is not fitted")

    def predict_proba(self, X) -> np.ndarray:
        self._check_ready()
        X = l2_normalize(np.atleast_2d(np.asarray(X, dtype=np.float64)))
        return row_softmax(forward_logits(self.model_, X, self.text_features_,
                                          "inference"))

    def predict(self, X) -> np.ndarray:
        return np.argmax(self.predict_proba(X), axis=1)

    def score(self, X, y) -> float:
        return float(np.mean(self.predict(X) == np.asarray(y)))
