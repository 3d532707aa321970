"""Frozen handcrafted image encoder.

Stands in for a pretrained vision backbone: no learned weights, fixed
statistics. Raw features are 4x4 average-pooled intensities plus 4x4
average-pooled horizontal-gradient magnitudes (32 dims), standardized
against the pretraining corpus. Other embedding widths go through a fixed
seeded orthonormal projection.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .numerics import RngStream
from .synthdata import Dataset

RAW_FEATURE_DIM = 32
_STD_FLOOR = 1e-6
_PROJECTION_SEED = 0x05CA12E


class EncoderError(ValueError):
    pass


def raw_features(pixels: np.ndarray) -> np.ndarray:
    """32-dim raw feature vector for one image, float64."""
    size = pixels.shape[-1]
    if pixels.shape[-2] != size or size % 4 != 0:
        raise EncoderError(f"image shape {pixels.shape} is not square with size % 4 == 0")
    block = size // 4
    img = pixels.astype(np.float64)
    pooled = img.reshape(*img.shape[:-2], 4, block, 4, block).mean(axis=(-3, -1))
    grad = np.abs(np.gradient(img, axis=-1))
    grad_pooled = grad.reshape(*img.shape[:-2], 4, block, 4, block).mean(axis=(-3, -1))
    return np.concatenate(
        [pooled.reshape(*img.shape[:-2], 16), grad_pooled.reshape(*img.shape[:-2], 16)],
        axis=-1,
    )


@dataclass(frozen=True)
class Standardizer:
    mean: np.ndarray  # (32,) float64
    std: np.ndarray  # (32,) float64, floored

    def apply(self, features: np.ndarray) -> np.ndarray:
        return (features - self.mean) / self.std

    def to_json(self) -> str:
        return json.dumps(
            {"mean": [repr(float(v)) for v in self.mean], "std": [repr(float(v)) for v in self.std]},
            sort_keys=True,
        )

    @staticmethod
    def from_json(text: str) -> "Standardizer":
        obj = json.loads(text)
        return Standardizer(
            mean=np.array([float(v) for v in obj["mean"]], dtype=np.float64),
            std=np.array([float(v) for v in obj["std"]], dtype=np.float64),
        )


def fit_standardizer(corpus: Dataset) -> Standardizer:
    """Per-dimension mean and std over the corpus, std floored at 1e-6."""
    if len(corpus) == 0:
        raise EncoderError("cannot fit a standardizer on an empty corpus")
    feats = raw_features(corpus.pixels)
    return Standardizer(
        mean=feats.mean(axis=0),
        std=np.maximum(feats.std(axis=0), _STD_FLOOR),
    )


@lru_cache(maxsize=8)
def _projection(dim: int) -> np.ndarray:
    """Fixed orthonormal map (dim, 32); the seed never varies per experiment."""
    stream = RngStream(_PROJECTION_SEED, f"encoder/projection/{dim}")
    if dim >= RAW_FEATURE_DIM:
        a = stream.normal((dim, RAW_FEATURE_DIM))
        q, r = np.linalg.qr(a)
        return q * np.sign(np.diag(r))
    a = stream.normal((RAW_FEATURE_DIM, dim))
    q, r = np.linalg.qr(a)
    return (q * np.sign(np.diag(r))).T


def embed(pixels: np.ndarray, standardizer: Standardizer, dim: int = RAW_FEATURE_DIM) -> np.ndarray:
    """Embed one image (2-d pixels) or a batch (3-d) to float32 vectors."""
    if dim < 1:
        raise EncoderError(f"embedding dim must be positive, got {dim}")
    z = standardizer.apply(raw_features(pixels))
    if dim != RAW_FEATURE_DIM:
        z = z @ _projection(dim).T
    return z.astype(np.float32)


def embed_dataset(ds: Dataset, standardizer: Standardizer, dim: int = RAW_FEATURE_DIM) -> np.ndarray:
    if len(ds) == 0:
        raise EncoderError("cannot embed an empty dataset")
    return embed(ds.pixels, standardizer, dim)


def category_representation(embeddings: np.ndarray) -> np.ndarray:
    """Arithmetic mean of category embeddings. Deliberately not L2-normalized."""
    embeddings = np.asarray(embeddings)
    if embeddings.ndim != 2 or embeddings.shape[0] == 0:
        raise EncoderError("category_representation needs a nonempty (n, d) array")
    return embeddings.mean(axis=0)
