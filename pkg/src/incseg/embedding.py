"""Scene-level embedders used for neighbour retrieval.

The built-in embedder needs no weights: coarse spatial colour statistics
plus gradient-orientation histograms, unit-normalised. Anything that maps an
image to a fixed-length vector (e.g. the pooled features of a pretrained
CNN) can be plugged in through :class:`ExternalEmbedder`.
"""
from __future__ import annotations

from typing import Callable

import numpy as np


class GridStatsEmbedder:
    """Colour means on a ``color_grid`` x ``color_grid`` layout plus
    magnitude-weighted orientation histograms on an ``orient_grid`` layout.

    With the defaults (4, 2, 4 bins) the vector has 4*4*3 + 2*2*4 = 64 entries.
    """

    def __init__(self, color_grid: int = 4, orient_grid: int = 2, orient_bins: int = 4,
                 gradient_weight: float = 1.0):
        self.color_grid = color_grid
        self.orient_grid = orient_grid
        self.orient_bins = orient_bins
        self.gradient_weight = gradient_weight
        self.dim = color_grid * color_grid * 3 + orient_grid * orient_grid * orient_bins
        self.tag = f"grid-c{color_grid}-o{orient_grid}x{orient_bins}-w{gradient_weight:g}"

    @staticmethod
    def _cells(n, k):
        edges = np.linspace(0, n, k + 1).round().astype(int)
        return list(zip(edges[:-1], edges[1:]))

    def __call__(self, image: np.ndarray) -> np.ndarray:
        img = np.asarray(image, dtype=np.float64) / 255.0
        H, W = img.shape[:2]
        feats = []
        for y0, y1 in self._cells(H, self.color_grid):
            for x0, x1 in self._cells(W, self.color_grid):
                cell = img[y0:max(y1, y0 + 1), x0:max(x1, x0 + 1)]
                feats.append(cell.reshape(-1, 3).mean(axis=0) - 0.5)

        gray = img.mean(axis=2)
        gy, gx = np.gradient(gray)
        mag = np.hypot(gx, gy)
        theta = np.mod(np.arctan2(gy, gx), np.pi)
        bins = np.minimum((theta / np.pi * self.orient_bins).astype(int), self.orient_bins - 1)
        for y0, y1 in self._cells(H, self.orient_grid):
            for x0, x1 in self._cells(W, self.orient_grid):
                b = bins[y0:y1, x0:x1].ravel()
                m = mag[y0:y1, x0:x1].ravel()
                hist = np.bincount(b, weights=m, minlength=self.orient_bins)
                feats.append(self.gradient_weight * hist / max(b.size, 1))

        vec = np.concatenate(feats)
        norm = np.linalg.norm(vec)
        if norm < 1e-12:
            # flat mid-grey image; keep the output a unit vector
            return np.full(self.dim, 1.0 / np.sqrt(self.dim))
        return vec / norm


class ExternalEmbedder:
    """Adapter for any ``image -> vector`` callable with a declared size."""

    def __init__(self, fn: Callable[[np.ndarray], np.ndarray], dim: int, tag: str):
        self.fn = fn
        self.dim = dim
        self.tag = tag

    def __call__(self, image):
        vec = np.asarray(self.fn(image), dtype=np.float64).ravel()
        if vec.shape[0] != self.dim:
            raise ValueError(f"embedder {self.tag!r} returned {vec.shape[0]} values, declared {self.dim}")
        return vec


def default_embedder() -> GridStatsEmbedder:
    return GridStatsEmbedder()


def scene_embed(embedder, image: np.ndarray) -> np.ndarray:
    return embedder(image)
