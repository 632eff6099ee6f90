"""Quantitative evaluation: reconstruction error, PSNR, SSIM, sparsity,
and per-layer color variance."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .errors import ShapeError
from .stacks import AlphaStack, LayerStack

PSNR_CAP_DB = 100.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
COLOR_VAR_ALPHA_THRESHOLD = 0.01


@dataclass
class EvalReport:
    reconstruction_mse: float
    psnr: float
    ssim: float
    sparsity: float
    color_variance: float

    def to_dict(self) -> dict[str, float]:
        return asdict(self)


def reconstruction_mse(original: np.ndarray, reconstructed: np.ndarray) -> float:
    a = np.asarray(original, dtype=np.float64)
    b = np.asarray(reconstructed, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch: {a.shape} vs {b.shape}")
    return float(((a - b) ** 2).mean())


def psnr(original: np.ndarray, reconstructed: np.ndarray) -> float:
    """Peak signal-to-noise ratio in dB for unit-peak images, capped at 100."""
    mse = reconstruction_mse(original, reconstructed)
    if mse <= 0:
        return PSNR_CAP_DB
    return min(PSNR_CAP_DB, float(10.0 * np.log10(1.0 / mse)))


def _gaussian_window(size: int, sigma: float) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x ** 2) / (2.0 * sigma ** 2))
    return g / g.sum()


def _filter_valid(img: np.ndarray, window: np.ndarray) -> np.ndarray:
    """Separable valid-mode correlation with a 1D window applied on both axes."""
    tmp = np.apply_along_axis(lambda row: np.correlate(row, window, mode="valid"), 1, img)
    return np.apply_along_axis(lambda col: np.correlate(col, window, mode="valid"), 0, tmp)


def ssim(original: np.ndarray, reconstructed: np.ndarray) -> float:
    """Mean local structural similarity on channel-mean grayscale."""
    a = np.asarray(original, dtype=np.float64)
    b = np.asarray(reconstructed, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch: {a.shape} vs {b.shape}")
    if a.ndim == 3:
        a = a.mean(axis=2)
        b = b.mean(axis=2)
    if a.shape[0] < SSIM_WINDOW or a.shape[1] < SSIM_WINDOW:
        raise ShapeError(f"image {a.shape} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} "
                         "SSIM window")
    win = _gaussian_window(SSIM_WINDOW, SSIM_SIGMA)
    mu_a = _filter_valid(a, win)
    mu_b = _filter_valid(b, win)
    var_a = _filter_valid(a * a, win) - mu_a ** 2
    var_b = _filter_valid(b * b, win) - mu_b ** 2
    cov = _filter_valid(a * b, win) - mu_a * mu_b
    c1 = SSIM_K1 ** 2
    c2 = SSIM_K2 ** 2
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return float((num / den).mean())


def sparsity_score(alphas: AlphaStack) -> float:
    """Mean over pixels of sum(a)/sum(a^2) - 1; 0 at one-hot, K-1 at uniform."""
    if not alphas.normalized:
        raise ValueError("sparsity score requires a normalized alpha stack")
    a = alphas.values.astype(np.float64)
    s1 = a.sum(axis=0)
    s2 = (a ** 2).sum(axis=0)
    return float((s1 / s2 - 1.0).mean())


def color_variance(stack: LayerStack, threshold: float = COLOR_VAR_ALPHA_THRESHOLD) -> float:
    """Summed per-channel variance of each layer's visible colors, averaged
    over layers. A layer counts pixels where its alpha exceeds the threshold
    and contributes 0 when it has none."""
    total = 0.0
    for i in range(stack.k):
        sel = stack.alphas[i] > threshold
        if not np.any(sel):
            continue
        colors = stack.colors[i][sel].astype(np.float64)
        total += float(colors.var(axis=0).sum())
    return total / stack.k


def evaluate(original: np.ndarray, stack: LayerStack) -> EvalReport:
    """All metrics for one decomposition against its source image."""
    from .layer_ops import compose

    recon = compose(stack)
    alphas = AlphaStack(stack.alphas, normalized=True)
    return EvalReport(
        reconstruction_mse=reconstruction_mse(original, recon),
        psnr=psnr(original, recon),
        ssim=ssim(original, recon),
        sparsity=sparsity_score(alphas),
        color_variance=color_variance(stack),
    )
