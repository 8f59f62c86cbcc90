"""Deterministic local encoder pair for images and prompts.

Both encoders derive their weights from named SHA-256 streams instead of
a downloaded checkpoint: the same package version always produces
bit-identical features on the same machine, which is what the export
format promises. The image side projects resized RGB pixels through a
fixed random linear map; the text side sums fixed random directions,
one per character trigram. Neither is semantically meaningful — they
exist to exercise real image folders end to end — but class-wise they
behave like embeddings: identical inputs coincide, distinct inputs
spread out, and every output is unit-norm.
"""

import hashlib
import math

import numpy as np
from PIL import Image

ENCODER_NAME = "hashed-projection-v1"
DEFAULT_WIDTH = 64
DEFAULT_IMAGE_SIZE = 32


def _stream(name: str) -> np.random.Generator:
    digest = hashlib.sha256(name.encode("utf-8")).digest()
    return np.random.default_rng(int.from_bytes(digest[:8], "big"))


def _unit(v: np.ndarray) -> np.ndarray:
    norm = float(np.linalg.norm(v))
    if norm == 0.0:
        raise ValueError("cannot normalize a zero vector")
    return v / norm


class ImageEncoder:
    """Fixed random projection of resized RGB pixels."""

    def __init__(self, width: int = DEFAULT_WIDTH,
                 image_size: int = DEFAULT_IMAGE_SIZE):
        if width < 2 or image_size < 2:
            raise ValueError("width and image_size must be >= 2")
        self.width = width
        self.image_size = image_size
        n_in = 3 * image_size * image_size
        rng = _stream(f"embedextract/image/{width}x{n_in}")
        self.projection = rng.standard_normal((width, n_in)) / math.sqrt(n_in)

    def _project(self, image: Image.Image) -> np.ndarray:
        resized = image.convert("RGB").resize(
            (self.image_size, self.image_size), Image.BILINEAR)
        pixels = np.asarray(resized, dtype=np.float64).ravel() / 255.0
        return _unit(self.projection @ (pixels + 1e-3))

    def encode(self, image: Image.Image) -> np.ndarray:
        return self._project(image)

    def encode_crop(self, image: Image.Image, sample_key: str) -> np.ndarray:
        """Second pass over a randomized 80% crop; the crop offset is
        seeded by the sample's relative path, so re-runs are identical."""
        rng = _stream(f"embedextract/crop/{sample_key}")
        rgb = image.convert("RGB")
        w, h = rgb.size
        cw, ch = max(1, int(0.8 * w)), max(1, int(0.8 * h))
        left = int(rng.integers(0, w - cw + 1))
        top = int(rng.integers(0, h - ch + 1))
        return self._project(rgb.crop((left, top, left + cw, top + ch)))


class TextEncoder:
    """Sum of fixed random directions, one per character trigram."""

    def __init__(self, width: int = DEFAULT_WIDTH):
        if width < 2:
            raise ValueError("width must be >= 2")
        self.width = width
        self._cache: dict[str, np.ndarray] = {}

    def _trigram_vector(self, trigram: str) -> np.ndarray:
        if trigram not in self._cache:
            rng = _stream(f"embedextract/text/{self.width}/{trigram}")
            self._cache[trigram] = rng.standard_normal(self.width)
        return self._cache[trigram]

    def encode(self, text: str) -> np.ndarray:
        padded = f"  {text.strip().lower()}  "
        total = np.zeros(self.width)
        for i in range(len(padded) - 2):
            total += self._trigram_vector(padded[i:i + 3])
        return _unit(total)
