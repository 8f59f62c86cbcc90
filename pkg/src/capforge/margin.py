"""Confusion-aware calibrated margin.

The margin state couples how similar two classes look (max of visual and
textual prototype cosine, clamped to [0, 1]) with how lopsided the
model's confident predictions currently are. Classes the model under-
predicts receive a larger additive penalty on the logits of similar
competitors, which pushes training toward more separable and more
balanced predictions. The state is a pure snapshot, rebuilt from fresh
model predictions once per epoch.
"""

from dataclasses import dataclass

import numpy as np

from .cluster import l2_normalize
from .errors import ValidationError
from .validation import as_float_matrix


@dataclass
class MarginState:
    sim_matrix: np.ndarray      # S, (C, C), symmetric, in [0, 1]
    sigma: np.ndarray           # confident-prediction counts per class
    delta: np.ndarray           # per-class tendency, in [0, 1]
    big_delta: float            # overall imbalance, max of delta
    m_vec: np.ndarray           # per-class margin scales
    margin: np.ndarray          # M, (C, C), zero diagonal
    base_scale: float
    tau: float

    @classmethod
    def zeros(cls, n_classes: int, base_scale: float, tau: float) -> "MarginState":
        Z = np.zeros((n_classes, n_classes))
        z = np.zeros(n_classes)
        return cls(Z.copy(), z.copy(), z.copy(), 0.0, z.copy(), Z.copy(),
                   base_scale, tau)

    def to_json(self) -> dict:
        return {
            "sim_matrix": self.sim_matrix.tolist(),
            "sigma": [int(s) for s in self.sigma],
            "delta": self.delta.tolist(),
            "big_delta": self.big_delta,
            "m_vec": self.m_vec.tolist(),
            "margin": self.margin.tolist(),
            "base_scale": self.base_scale,
            "tau": self.tau,
        }


def class_prototypes(features_by_class: dict[int, np.ndarray],
                     text_features: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Visual prototype per class (row mean, re-normalized) plus the text
    prototypes as given (the current text-branch outputs)."""
    text = as_float_matrix(text_features, "text_features")
    C, D = text.shape
    protos = np.empty((C, D))
    for c in range(C):
        rows = features_by_class.get(c)
        if rows is None or len(rows) == 0:
            raise ValidationError(f"class {c} has no feature rows")
        mean = np.asarray(rows, dtype=np.float64).mean(axis=0)
        norm = np.linalg.norm(mean)
        if norm == 0.0:
            raise ValidationError(f"class {c} prototype collapsed to zero")
        protos[c] = mean / norm
    return protos, text


def similarity_matrix(visual_protos: np.ndarray,
                      text_protos: np.ndarray) -> np.ndarray:
    """Pairwise class similarity: max of the two modality cosines, clamped
    to [0, 1] (negative cosine means no confusion, hence no margin)."""
    V = l2_normalize(as_float_matrix(visual_protos, "visual_protos"))
    T = l2_normalize(as_float_matrix(text_protos, "text_protos"))
    S = np.maximum(V @ V.T, T @ T.T)
    S = np.clip(S, 0.0, 1.0)
    return 0.5 * (S + S.T)   # kill asymmetric float noise


def tendency_stats(confident_preds: list[tuple[int, float]] | np.ndarray,
                   tau: float, n_classes: int) -> tuple[np.ndarray, np.ndarray, float]:
    """Per-class confident-prediction counts and the derived imbalance.

    ``confident_preds`` holds (argmax class, max softmax) pairs for every
    pseudolabeled sample. sigma counts pairs at or above ``tau``; the
    tendency of a class is its shortfall relative to the most-predicted
    class; the overall imbalance is the worst shortfall. When nothing
    clears the threshold the margin is disabled (all zeros).
    """
    sigma = np.zeros(n_classes, dtype=np.int64)
    for cls, conf in confident_preds:
        if conf >= tau:
            sigma[int(cls)] += 1
    top = sigma.max() if len(sigma) else 0
    if top == 0:
        return sigma, np.zeros(n_classes), 0.0
    delta = 1.0 - sigma / top
    return sigma, delta, float(delta.max())


def margin_matrix(S: np.ndarray, delta: np.ndarray, big_delta: float,
                  base_scale: float) -> np.ndarray:
    """M[i, j] = S[i, j] * (base_scale * big_delta * delta[i]), zero diagonal.

    Row scaling means the margin grows with the TRUE class's shortfall:
    under-predicted classes demand a bigger score gap against similar
    competitors.
    """
    m_vec = base_scale * big_delta * np.asarray(delta, dtype=np.float64)
    M = np.asarray(S, dtype=np.float64) * m_vec[:, None]
    np.fill_diagonal(M, 0.0)
    return M


def build_margin_state(features_by_class: dict[int, np.ndarray],
                       text_features: np.ndarray,
                       confident_preds, tau: float, n_classes: int,
                       base_scale: float) -> MarginState:
    """Assemble the full per-epoch snapshot."""
    vp, tp = class_prototypes(features_by_class, text_features)
    S = similarity_matrix(vp, tp)
    sigma, delta, big = tendency_stats(confident_preds, tau, n_classes)
    m_vec = base_scale * big * delta
    M = margin_matrix(S, delta, big, base_scale)
    return MarginState(sim_matrix=S, sigma=sigma, delta=delta, big_delta=big,
                       m_vec=m_vec, margin=M, base_scale=base_scale, tau=tau)


def margin_loss(y: int, z: np.ndarray, M: np.ndarray) -> tuple[float, np.ndarray]:
    """Margin cross-entropy for one sample.

    Competitor logits are lifted by their margin against the true class
    before the softmax; with M = 0 this is exactly standard cross-entropy.
    Returns (loss, gradient w.r.t. z). Computed with max-shift stability.
    """
    z = np.asarray(z, dtype=np.float64)
    if not np.all(np.isfinite(z)):
        raise ValidationError("logits contain NaN or Inf")
    adjusted = z + M[y]          # M has zero diagonal, so z[y] is untouched
    shift = adjusted - adjusted.max()
    log_norm = np.log(np.exp(shift).sum())
    loss = float(log_norm - shift[y])
    grad = np.exp(shift - log_norm)
    grad[y] -= 1.0
    return loss, grad


def margin_loss_batch(ys: np.ndarray, Z: np.ndarray,
                      M: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean margin loss over a batch; gradient already divided by batch size."""
    Z = np.asarray(Z, dtype=np.float64)
    if not np.all(np.isfinite(Z)):
        raise ValidationError("logits contain NaN or Inf")
    ys = np.asarray(ys, dtype=np.int64)
    b = len(ys)
    adjusted = Z + M[ys]
    shift = adjusted - adjusted.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shift).sum(axis=1))
    losses = log_norm - shift[np.arange(b), ys]
    grad = np.exp(shift - log_norm[:, None])
    grad[np.arange(b), ys] -= 1.0
    return float(losses.mean()), grad / b
