"""Layer stack containers shared across the pipeline."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .palette import Palette

ALPHA_SUM_TOL = 1e-6


@dataclass
class AlphaStack:
    """K per-layer opacity maps, shape (K, H, W), values in [0, 1].

    ``normalized`` records whether the per-pixel unit-sum condition has
    been established.
    """

    values: np.ndarray
    normalized: bool = False

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float32)
        if self.values.ndim != 3:
            raise ValueError(f"alpha stack must be (K, H, W), got shape {self.values.shape}")

    @property
    def k(self) -> int:
        return self.values.shape[0]

    def sum_error(self) -> float:
        """Largest per-pixel deviation of the alpha sum from 1."""
        sums = self.values.sum(axis=0, dtype=np.float64)
        return float(np.abs(sums - 1.0).max())


@dataclass
class LayerStack:
    """K RGBA layers: colors (K, H, W, 3) and alphas (K, H, W), plus the palette."""

    colors: np.ndarray
    alphas: np.ndarray
    palette: Palette

    def __post_init__(self):
        self.colors = np.asarray(self.colors, dtype=np.float32)
        self.alphas = np.asarray(self.alphas, dtype=np.float32)
        if self.colors.ndim != 4 or self.colors.shape[3] != 3:
            raise ValueError(f"layer colors must be (K, H, W, 3), got {self.colors.shape}")
        if self.alphas.shape != self.colors.shape[:3]:
            raise ValueError(f"alpha shape {self.alphas.shape} does not match "
                             f"colors {self.colors.shape[:3]}")
        if len(self.palette) != self.colors.shape[0]:
            raise ValueError(f"palette size {len(self.palette)} != layer count "
                             f"{self.colors.shape[0]}")

    @property
    def k(self) -> int:
        return self.colors.shape[0]

    @property
    def height(self) -> int:
        return self.colors.shape[1]

    @property
    def width(self) -> int:
        return self.colors.shape[2]

    def rgba(self) -> np.ndarray:
        """Layers as (K, H, W, 4) with straight (unpremultiplied) alpha."""
        return np.concatenate([self.colors, self.alphas[..., None]], axis=3)
