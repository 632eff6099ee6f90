"""Palette extraction and validation.

K-means in RGB space over the distinct colors of an image (weighted by
pixel count), with k-means++ seeding. Operating on sorted distinct colors
makes the result independent of pixel order and cheap on flat images.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import PaletteError

MAX_COLORS = 16
MAX_KMEANS_ITERS = 50
SUBSAMPLE_LIMIT = 2 ** 18


@dataclass
class Palette:
    """Ordered list of layer anchor colors, each channel in [0, 1]."""

    colors: np.ndarray  # (K, 3) float32
    source: str = "manual"  # "auto" | "manual"

    def __post_init__(self):
        self.colors = np.asarray(self.colors, dtype=np.float32).reshape(-1, 3)
        if not 1 <= len(self.colors) <= MAX_COLORS:
            raise PaletteError(f"palette size must be in [1, {MAX_COLORS}], got {len(self.colors)}")
        if np.any(self.colors < 0) or np.any(self.colors > 1):
            raise PaletteError("palette channels must lie in [0, 1]")
        if self.source not in ("auto", "manual"):
            raise PaletteError(f"palette source must be 'auto' or 'manual', got {self.source!r}")

    def __len__(self) -> int:
        return len(self.colors)

    def to_lists(self) -> list[list[float]]:
        return [[float(c) for c in row] for row in self.colors]


def _sq_dists(points: np.ndarray, centers: np.ndarray) -> np.ndarray:
    # ||p - c||^2 expanded so the cross term is one BLAS matmul
    d2 = ((points ** 2).sum(axis=1)[:, None]
          - 2.0 * points @ centers.T
          + (centers ** 2).sum(axis=1)[None, :])
    return np.maximum(d2, 0.0)


def _assign(points: np.ndarray, centers: np.ndarray) -> np.ndarray:
    # Ties go to the lowest center index (argmin guarantees this).
    return np.argmin(_sq_dists(points, centers), axis=1)


def kmeans_objective(points: np.ndarray, centers: np.ndarray,
                     weights: np.ndarray | None = None) -> float:
    d2 = _sq_dists(points, centers).min(axis=1)
    if weights is None:
        return float(d2.sum())
    return float((d2 * weights).sum())


def _lloyd_update(points: np.ndarray, centers: np.ndarray, weights: np.ndarray,
                  assign: np.ndarray) -> np.ndarray:
    k = len(centers)
    counts = np.bincount(assign, weights=weights, minlength=k)
    new = np.empty((k, 3), dtype=np.float64)
    for d in range(3):
        new[:, d] = np.bincount(assign, weights=weights * points[:, d], minlength=k)
    nonzero = counts > 0
    new[nonzero] /= counts[nonzero, None]
    empty = np.flatnonzero(~nonzero)
    if len(empty):
        dist = ((points - centers[assign]) ** 2).sum(axis=1)
        order = np.argsort(-dist, kind="stable")
        for slot, i in enumerate(empty):
            new[i] = points[order[slot % len(points)]]
    return new


def kmeans_iterate(points: np.ndarray, centers: np.ndarray,
                   weights: np.ndarray | None = None) -> np.ndarray:
    """One Lloyd step: assign to nearest center, recompute weighted means.

    Empty clusters are re-seeded at the point farthest from its own
    assigned center (each reseed consumes that point so two empty clusters
    never collapse onto it).
    """
    points = np.asarray(points, dtype=np.float64)
    if len(points) == 0:
        raise PaletteError("kmeans needs at least one point")
    if weights is None:
        weights = np.ones(len(points))
    centers = np.asarray(centers, dtype=np.float64)
    return _lloyd_update(points, centers, weights, _assign(points, centers))


def _kmeans_pp_seed(points: np.ndarray, weights: np.ndarray, k: int,
                    rng: np.random.Generator) -> np.ndarray:
    n = len(points)
    centers = np.empty((k, 3), dtype=np.float64)
    probs = weights / weights.sum()
    centers[0] = points[rng.choice(n, p=probs)]
    d2 = ((points - centers[0]) ** 2).sum(axis=1)
    for i in range(1, k):
        mass = d2 * weights
        total = mass.sum()
        if total <= 0:
            centers[i] = centers[i - 1]
            continue
        centers[i] = points[rng.choice(n, p=mass / total)]
        d2 = np.minimum(d2, ((points - centers[i]) ** 2).sum(axis=1))
    return centers


def extract_palette(image: np.ndarray, k: int, seed: int = 0) -> Palette:
    """Cluster the image's pixel colors and return the K centers.

    Centers come back ordered by descending cluster population; the result
    depends only on the multiset of pixel colors and the seed.
    """
    if k < 1:
        raise PaletteError(f"k must be >= 1, got {k}")
    if k > MAX_COLORS:
        raise PaletteError(f"k must be <= {MAX_COLORS}, got {k}")
    pixels = np.asarray(image, dtype=np.float64).reshape(-1, 3)
    if len(pixels) == 0:
        raise PaletteError("cannot extract a palette from an empty image")
    colors, counts = np.unique(pixels, axis=0, return_counts=True)
    if len(colors) > SUBSAMPLE_LIMIT:
        idx = np.linspace(0, len(colors) - 1, SUBSAMPLE_LIMIT).round().astype(np.int64)
        colors, counts = colors[idx], counts[idx]
    weights = counts.astype(np.float64)

    n_distinct = len(colors)
    rng = np.random.default_rng(seed)
    k_eff = min(k, n_distinct)
    centers = _kmeans_pp_seed(colors, weights, k_eff, rng)
    assign = _assign(colors, centers)
    for _ in range(MAX_KMEANS_ITERS):
        centers = _lloyd_update(colors, centers, weights, assign)
        new_assign = _assign(colors, centers)
        if np.array_equal(new_assign, assign):
            break
        assign = new_assign

    pops = np.array([weights[assign == i].sum() for i in range(k_eff)])
    order = np.argsort(-pops, kind="stable")
    centers = centers[order]
    if k_eff < k:
        warnings.warn(f"only {n_distinct} distinct colors for k={k}; "
                      "duplicating nearest centers to fill the palette")
        extra = [centers[i % k_eff] for i in range(k - k_eff)]
        centers = np.vstack([centers, extra])
    return Palette(np.clip(centers, 0.0, 1.0).astype(np.float32), source="auto")
