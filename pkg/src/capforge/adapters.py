"""Residual adapter model over frozen embeddings, with hand-written
gradients.

Both branches stack residual-plus-renormalize maps: a trunk map that
stays active at inference (the persistent fine-tuning component) and
per-role adapters (main / pseudo on the image side, one on the text
side) that are used only during training. All weights start at zero, so
an untrained model reproduces plain temperature-scaled cosine logits
exactly. Everything runs in float64 numpy; no autodiff framework.
"""

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError
from .margin import margin_loss_batch

WEIGHT_NAMES = ("trunk_img", "trunk_txt", "main_adapter", "pseudo_adapter",
                "text_adapter")
BRANCHES = ("main", "pseudo", "inference")


@dataclass
class AdapterModel:
    trunk_img: np.ndarray       # (D, D)
    trunk_txt: np.ndarray
    main_adapter: np.ndarray
    pseudo_adapter: np.ndarray
    text_adapter: np.ndarray
    gamma: float = 100.0

    @classmethod
    def init(cls, dim: int, gamma: float = 100.0) -> "AdapterModel":
        zeros = lambda: np.zeros((dim, dim))  # noqa: E731
        return cls(zeros(), zeros(), zeros(), zeros(), zeros(), gamma)

    @property
    def dim(self) -> int:
        return self.trunk_img.shape[0]

    def weights(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in WEIGHT_NAMES}

    def copy(self) -> "AdapterModel":
        return AdapterModel(*(getattr(self, n).copy() for n in WEIGHT_NAMES),
                            gamma=self.gamma)


def _layer_forward(H: np.ndarray, W: np.ndarray):
    """u = normalize(h + W h), batched over rows of H."""
    V = H + H @ W.T
    norms = np.linalg.norm(V, axis=1, keepdims=True)
    if np.any(norms == 0.0):
        raise ValidationError("residual layer produced a zero vector")
    return V / norms, norms


def _layer_backward(dU: np.ndarray, U: np.ndarray, norms: np.ndarray,
                    H: np.ndarray, W: np.ndarray):
    """Backprop through normalize(h + W h). Returns (dH, dW)."""
    dV = (dU - np.sum(dU * U, axis=1, keepdims=True) * U) / norms
    dW = dV.T @ H
    dH = dV + dV @ W
    return dH, dW


def image_embed(model: AdapterModel, X: np.ndarray, branch: str) -> np.ndarray:
    """Image-branch output embedding; inference uses the trunk only."""
    if branch not in BRANCHES:
        raise ValidationError(f"unknown branch {branch!r}")
    U1, _ = _layer_forward(np.asarray(X, dtype=np.float64), model.trunk_img)
    if branch == "inference":
        return U1
    W = model.main_adapter if branch == "main" else model.pseudo_adapter
    U2, _ = _layer_forward(U1, W)
    return U2


def text_embed(model: AdapterModel, text_features: np.ndarray,
               training: bool) -> np.ndarray:
    T1, _ = _layer_forward(np.asarray(text_features, dtype=np.float64),
                           model.trunk_txt)
    if not training:
        return T1
    T2, _ = _layer_forward(T1, model.text_adapter)
    return T2


def forward_logits(model: AdapterModel, X: np.ndarray, text_features: np.ndarray,
                   branch: str = "inference") -> np.ndarray:
    """Logits of each sample row against every class.

    Training branches apply their image adapter and the text adapter;
    the inference branch applies trunk maps only.
    """
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    U = image_embed(model, X, branch)
    T = text_embed(model, text_features, training=branch != "inference")
    return model.gamma * (U @ T.T)


def loss_and_grads(model: AdapterModel, X: np.ndarray, ys: np.ndarray,
                   text_features: np.ndarray, M: np.ndarray,
                   branch: str) -> tuple[float, dict[str, np.ndarray]]:
    """Mean margin loss of one batch plus gradients for every weight the
    branch touches (trunk maps, the branch's image adapter, text adapter)."""
    if branch not in ("main", "pseudo"):
        raise ValidationError(f"cannot train through branch {branch!r}")
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    T0 = np.asarray(text_features, dtype=np.float64)
    W_branch = model.main_adapter if branch == "main" else model.pseudo_adapter
    branch_name = "main_adapter" if branch == "main" else "pseudo_adapter"

    U1, n1 = _layer_forward(X, model.trunk_img)
    U2, n2 = _layer_forward(U1, W_branch)
    T1, m1 = _layer_forward(T0, model.trunk_txt)
    T2, m2 = _layer_forward(T1, model.text_adapter)
    Z = model.gamma * (U2 @ T2.T)

    loss, dZ = margin_loss_batch(ys, Z, M)
    dU2 = model.gamma * (dZ @ T2)
    dT2 = model.gamma * (dZ.T @ U2)

    dU1, dW_branch = _layer_backward(dU2, U2, n2, U1, W_branch)
    _, dW_trunk_img = _layer_backward(dU1, U1, n1, X, model.trunk_img)
    dT1, dW_text = _layer_backward(dT2, T2, m2, T1, model.text_adapter)
    _, dW_trunk_txt = _layer_backward(dT1, T1, m1, T0, model.trunk_txt)

    grads = {
        "trunk_img": dW_trunk_img,
        "trunk_txt": dW_trunk_txt,
        "text_adapter": dW_text,
        branch_name: dW_branch,
    }
    return loss, grads


class SGDMomentum:
    """Plain SGD with momentum and decoupled-from-nothing weight decay
    (decay is added to the gradient, the classic formulation)."""

    def __init__(self, model: AdapterModel, momentum: float = 0.9,
                 weight_decay: float = 0.1):
        self.model = model
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = {name: np.zeros_like(getattr(model, name))
                         for name in WEIGHT_NAMES}

    def step(self, grads: dict[str, np.ndarray], lr: float) -> None:
        for name, g in grads.items():
            W = getattr(self.model, name)
            g = g + self.weight_decay * W
            v = self.velocity[name]
            v *= self.momentum
            v += g
            W -= lr * v


def save_model(model: AdapterModel, path: str) -> None:
    """Checkpoint: JSON manifest plus one f32 binary per weight matrix."""
    os.makedirs(path, exist_ok=True)
    files = {}
    for name in WEIGHT_NAMES:
        fname = f"{name}.f32"
        getattr(model, name).astype("<f4").tofile(os.path.join(path, fname))
        files[name] = fname
    manifest = {"dim": model.dim, "gamma": model.gamma, "files": files}
    with open(os.path.join(path, "model.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_model(path: str) -> AdapterModel:
    manifest_path = os.path.join(path, "model.json")
    if not os.path.isfile(manifest_path):
        raise ValidationError(f"no model.json in {path}")
    with open(manifest_path, encoding="utf-8") as fh:
        manifest = json.load(fh)
    dim = int(manifest["dim"])
    weights = []
    for name in WEIGHT_NAMES:
        p = os.path.join(path, manifest["files"][name])
        if not os.path.isfile(p) or os.path.getsize(p) != dim * dim * 4:
            raise ValidationError(f"checkpoint file {p} missing or wrong size")
        weights.append(np.fromfile(p, dtype="<f4").reshape(dim, dim).astype(np.float64))
    return AdapterModel(*weights, gamma=float(manifest["gamma"]))
