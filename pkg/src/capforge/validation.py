"""Input validation helpers shared by the estimators and pipeline ops."""

import hashlib

import numpy as np

from .errors import ValidationError


def as_float_matrix(X, name: str = "X") -> np.ndarray:
    """Coerce to a 2-D float64 array, rejecting NaN/Inf."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise ValidationError(f"{name} must be 2-D, got shape {X.shape}")
    if not np.all(np.isfinite(X)):
        raise ValidationError(f"{name} contains NaN or Inf")
    return X


def as_float_vector(x, name: str = "x") -> np.ndarray:
    x = np.asarray(x, dtype=np.float64).ravel()
    if not np.all(np.isfinite(x)):
        raise ValidationError(f"{name} contains NaN or Inf")
    return x


def check_unit_rows(X: np.ndarray, name: str = "X", atol: float = 1e-5) -> None:
    norms = np.linalg.norm(X, axis=1)
    bad = np.abs(norms - 1.0) > atol
    if np.any(bad):
        i = int(np.argmax(bad))
        raise ValidationError(f"{name} row {i} has L2 norm {norms[i]:.6g}, expected 1")


def check_index_set(idx, n: int, name: str) -> np.ndarray:
    """Validate a split index set: ints in [0, n), no duplicates."""
    idx = np.asarray(idx, dtype=np.int64).ravel()
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise ValidationError(f"{name} contains index outside [0, {n})")
    if len(np.unique(idx)) != len(idx):
        raise ValidationError(f"{name} contains duplicate indices")
    return idx


def stream_rng(seed: int, name: str) -> np.random.Generator:
    """Named deterministic substream of the single pipeline seed.

    The stream key is derived from a stable hash of ``name`` so the same
    (seed, name) pair yields the same generator on every platform.
    """
    digest = hashlib.sha256(name.encode("utf-8")).digest()
    key = int.from_bytes(digest[:8], "little")
    return np.random.default_rng(np.random.SeedSequence([int(seed) & 0xFFFFFFFF, key]))


def stream_seed(seed: int, name: str) -> int:
    """Integer seed for APIs that take one (e.g. SeededKMeans)."""
    return int(stream_rng(seed, name).integers(0, 2**31 - 1))
