"""
Embedding providers used by the evaluation metrics.

A provider maps images (and optionally captions) to vectors in a shared space:

    pixelstat   8x8 luminance grid + 16-bin histogram per channel (d = 112), images only
    paramspace  normalized bucket vector of (category, count, radius) plus an
                off-palette slot; images via nucleus detection and hue,
                captions via the caption grammar
"""

import logging
from abc import ABC, abstractmethod
from typing import Dict, Sequence, Type

import numpy as np

from .codec import IMAGE_CHANNELS, IMAGE_SIZE, check_image
from .corpus import (
    COUNT_BUCKETS,
    RADIUS_BUCKETS,
    check_n_categories,
    infer_buckets,
    looks_like_tissue,
    parse_caption,
)

logger = logging.getLogger("aligndiff")

LUMA_WEIGHTS = np.array([0.299, 0.587, 0.114])
GRID = 8
HIST_BINS = 16


def luminance(image: np.ndarray) -> np.ndarray:
    return np.asarray(image, dtype=np.float64) @ LUMA_WEIGHTS


class EmbeddingProvider(ABC):
    """Deterministic image (and optionally text) embedder."""

    name: str = ""
    supports_text: bool = False

    @property
    @abstractmethod
    def dim(self) -> int:
        ...

    @abstractmethod
    def embed_image(self, image: np.ndarray) -> np.ndarray:
        ...

    def embed_text(self, text: str) -> np.ndarray:
        raise ValueError(f"Provider '{self.name}' has no text embedding; use 'paramspace'")

    def embed_images(self, images: Sequence[np.ndarray]) -> np.ndarray:
        if len(images) == 0:
            return np.zeros((0, self.dim))
        return np.stack([self.embed_image(img) for img in images])

    def embed_texts(self, texts: Sequence[str]) -> np.ndarray:
        if len(texts) == 0:
            return np.zeros((0, self.dim))
        return np.stack([self.embed_text(t) for t in texts])


class PixelStatProvider(EmbeddingProvider):
    name = "pixelstat"

    @property
    def dim(self) -> int:
        return GRID * GRID + IMAGE_CHANNELS * HIST_BINS

    def embed_image(self, image: np.ndarray) -> np.ndarray:
        image = np.asarray(check_image(image), dtype=np.float64)
        cell = IMAGE_SIZE // GRID
        grid = luminance(image).reshape(GRID, cell, GRID, cell).mean(axis=(1, 3)).ravel()
        hists = [
            np.histogram(image[..., c], bins=HIST_BINS, range=(0.0, 1.0))[0] / float(IMAGE_SIZE * IMAGE_SIZE)
            for c in range(IMAGE_CHANNELS)
        ]
        return np.concatenate([grid, *hists])


class ParamSpaceProvider(EmbeddingProvider):
    """One-hot (category | count bucket | radius bucket | off-palette), scaled to unit norm.

    An image with no detectable nuclei gets an all-zero category block. An image
    that does not show the stain background at all embeds as the off-palette
    unit vector, which no caption shares, so its PLIP-T against any prompt is 0.
    """

    name = "paramspace"
    supports_text = True

    def __init__(self, n_categories: int = 4):
        self.n_categories = check_n_categories(n_categories)
        self._counts = list(COUNT_BUCKETS)
        self._radii = list(RADIUS_BUCKETS)

    @property
    def dim(self) -> int:
        return self.n_categories + len(self._counts) + len(self._radii) + 1

    def bucket_vector(self, category: int, count_bucket: str, radius_bucket: str) -> np.ndarray:
        vec = np.zeros(self.dim)
        if 0 <= category < self.n_categories:
            vec[category] = 1.0
        elif category >= self.n_categories:
            raise ValueError(f"category {category} outside the {self.n_categories} evaluated")
        vec[self.n_categories + self._counts.index(count_bucket)] = 1.0
        vec[self.n_categories + len(self._counts) + self._radii.index(radius_bucket)] = 1.0
        return vec / np.linalg.norm(vec)

    def off_palette_vector(self) -> np.ndarray:
        vec = np.zeros(self.dim)
        vec[-1] = 1.0
        return vec

    def embed_image(self, image: np.ndarray) -> np.ndarray:
        image = check_image(image)
        if not looks_like_tissue(image):
            return self.off_palette_vector()
        return self.bucket_vector(*infer_buckets(image, self.n_categories))

    def embed_text(self, text: str) -> np.ndarray:
        return self.bucket_vector(*parse_caption(text))


PROVIDERS: Dict[str, Type[EmbeddingProvider]] = {
    PixelStatProvider.name: PixelStatProvider,
    ParamSpaceProvider.name: ParamSpaceProvider,
}
VALID_PROVIDERS = list(PROVIDERS)


def get_provider(name: str, n_categories: int = 4) -> EmbeddingProvider:
    if name not in PROVIDERS:
        raise ValueError(f"Unknown provider '{name}', choose from {sorted(PROVIDERS)}")
    if name == ParamSpaceProvider.name:
        return ParamSpaceProvider(n_categories)
    return PROVIDERS[name]()
