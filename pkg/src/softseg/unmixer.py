"""Per-pixel constrained color unmixing.

The optimization-based baseline: each pixel independently minimizes the
sparse unmixing energy (layer-cost plus sparsity term) together with a
quadratic penalty keeping the alpha-weighted color sum at the observed
pixel color. Alphas live on the simplex by construction (softmax of free
logits) and layer colors are clamped to the unit box, so the unit-sum and
box constraints hold structurally.

Descent uses a per-pixel adaptive step with monotone acceptance, all
pixels vectorized; exact one-hot assignments are always evaluated as
candidates, so the returned energy never exceeds the one-hot
initialization's.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .palette import Palette
from .stacks import AlphaStack, LayerStack

DEFAULT_ISOTROPIC_STD = 0.05
MIN_EIGENVALUE = 1e-6
SUM_SQ_FLOOR = 1e-8


@dataclass
class ColorModel:
    """Gaussian color model of one layer: mean color and 3x3 covariance."""

    mean: np.ndarray
    covariance: np.ndarray
    precision: np.ndarray = field(init=False)

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64).reshape(3)
        self.covariance = np.asarray(self.covariance, dtype=np.float64).reshape(3, 3)
        if not np.allclose(self.covariance, self.covariance.T, atol=1e-9):
            raise ValueError("covariance must be symmetric")
        eigvals = np.linalg.eigvalsh(self.covariance)
        if eigvals.min() < MIN_EIGENVALUE:
            raise ValueError(f"covariance eigenvalues must be >= {MIN_EIGENVALUE}, "
                             f"got {eigvals.min():.3e}")
        self.precision = np.linalg.inv(self.covariance)

    @classmethod
    def isotropic(cls, mean, std: float = DEFAULT_ISOTROPIC_STD) -> "ColorModel":
        return cls(mean, np.eye(3) * std ** 2)


def models_from_palette(palette: Palette, std: float = DEFAULT_ISOTROPIC_STD) -> list[ColorModel]:
    """Palette-only mode: isotropic models centered on the palette colors."""
    return [ColorModel.isotropic(c, std) for c in palette.colors]


@dataclass
class UnmixConfig:
    sparsity_weight: float = 1.0
    color_constraint_weight: float = 100.0
    max_iters: int = 500
    step_size: float = 0.02
    convergence_tol: float = 1e-9
    optimize_colors: bool = True

    def __post_init__(self):
        if self.sparsity_weight < 0 or self.color_constraint_weight < 0:
            raise ValueError("weights must be nonnegative")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if self.step_size <= 0 or self.convergence_tol < 0:
            raise ValueError("step_size must be positive, convergence_tol nonnegative")


@dataclass
class PixelUnmixResult:
    alphas: np.ndarray        # (K,) sum 1, each in [0, 1]
    layer_colors: np.ndarray  # (K, 3) in [0, 1]
    energy: float             # sparse unmixing energy (no color penalty)
    objective: float          # energy + color-constraint penalty (what was minimized)
    residual: float           # || sum_i alpha_i u_i - c ||_2
    converged: bool


@dataclass
class UnmixSummary:
    pixels: int
    non_converged: int
    iterations: int

    @property
    def converged_fraction(self) -> float:
        return 1.0 - self.non_converged / max(1, self.pixels)


@dataclass
class UnmixImageResult:
    alphas: AlphaStack
    layers: LayerStack
    summary: UnmixSummary


def _stack_models(models: list[ColorModel]) -> tuple[np.ndarray, np.ndarray]:
    means = np.stack([m.mean for m in models])          # (K, 3)
    precisions = np.stack([m.precision for m in models])  # (K, 3, 3)
    return means, precisions


def _layer_costs(u: np.ndarray, means: np.ndarray, precisions: np.ndarray) -> np.ndarray:
    # u: (P, K, 3) -> squared Mahalanobis distances (P, K)
    d = u - means[None]
    return np.einsum("pki,kij,pkj->pk", d, precisions, d)


def energy(alphas, layer_colors, models: list[ColorModel], sparsity_weight: float) -> float:
    """Sparse unmixing energy: alpha-weighted layer costs plus sparsity term."""
    alphas = np.asarray(alphas, dtype=np.float64).reshape(-1)
    u = np.asarray(layer_colors, dtype=np.float64).reshape(1, -1, 3)
    if len(alphas) != len(models) or u.shape[1] != len(models):
        raise ValueError("alphas, layer_colors and models must agree on K")
    costs = _layer_costs(u, *_stack_models(models))[0]
    sum_a = alphas.sum()
    sum_sq = max(float((alphas ** 2).sum()), SUM_SQ_FLOOR)
    return float((alphas * costs).sum() + sparsity_weight * (sum_a / sum_sq - 1.0))


def _objective(alpha, u, c, means, precisions, sigma, w):
    # alpha: (P, K), u: (P, K, 3), c: (P, 3); all on-simplex/in-box already
    costs = _layer_costs(u, means, precisions)
    data = (alpha * costs).sum(axis=1)
    q = np.maximum((alpha ** 2).sum(axis=1), SUM_SQ_FLOOR)
    sparsity = sigma * (1.0 / q - 1.0)
    r = np.einsum("pk,pki->pi", alpha, u) - c
    return data + sparsity + w * (r ** 2).sum(axis=1), costs, r


def _softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def _corner_candidates(c, means, precisions, sigma, w, optimize_colors):
    """Objective value and optimal color for each exact one-hot assignment."""
    p_pix, k = c.shape[0], means.shape[0]
    if optimize_colors:
        # argmin_u D_j(u) + w * ||u - c||^2, then clamp to the box
        lhs_inv = np.linalg.inv(precisions + w * np.eye(3)[None])  # (K, 3, 3)
        rhs = (np.einsum("kij,kj->ki", precisions, means)[None]
               + w * c[:, None, :])                                # (P, K, 3)
        u = np.clip(np.einsum("kij,pkj->pki", lhs_inv, rhs), 0.0, 1.0)
    else:
        u = np.broadcast_to(means[None], (p_pix, k, 3)).copy()
    costs = _layer_costs(u, means, precisions)           # (P, K)
    resid = u - c[:, None, :]
    vals = costs + w * (resid ** 2).sum(axis=2)          # one-hot: sparsity term is 0
    return vals, u


def _unmix_batch(c: np.ndarray, models: list[ColorModel], cfg: UnmixConfig):
    """Vectorized descent over a batch of pixel colors c (P, 3)."""
    means, precisions = _stack_models(models)
    k = len(models)
    p_pix = c.shape[0]
    sigma, w = cfg.sparsity_weight, cfg.color_constraint_weight

    corner_vals, corner_u = _corner_candidates(c, means, precisions, sigma, w,
                                               cfg.optimize_colors)
    best_corner = np.argmin(corner_vals, axis=1)

    if k == 1:
        alphas = np.ones((p_pix, 1))
        u = corner_u
        obj, costs, r = _objective(alphas, u, c, means, precisions, sigma, w)
        return (alphas, u[:, :, :], obj, np.full(p_pix, True), 0)

    # softened start biased to the best corner (a saturated softmax would
    # shrink the logit gradients to nothing); exact corners stay in the
    # candidate set below
    z = np.zeros((p_pix, k))
    z[np.arange(p_pix), best_corner] = 2.0
    u = corner_u.copy()
    step = np.full(p_pix, cfg.step_size)

    alpha = _softmax(z)
    obj, costs, r = _objective(alpha, u, c, means, precisions, sigma, w)
    last_gain = np.full(p_pix, np.inf)
    iters = 0
    for iters in range(1, cfg.max_iters + 1):
        q = np.maximum((alpha ** 2).sum(axis=1, keepdims=True), SUM_SQ_FLOOR)
        g_alpha = costs - sigma * 2.0 * alpha / q ** 2 \
            + 2.0 * w * np.einsum("pi,pki->pk", r, u)
        gz = alpha * (g_alpha - (alpha * g_alpha).sum(axis=1, keepdims=True))
        z_new = z - step[:, None] * gz
        if cfg.optimize_colors:
            gu = 2.0 * alpha[:, :, None] * (
                np.einsum("kij,pkj->pki", precisions, u - means[None])
                + w * r[:, None, :])
            u_new = np.clip(u - step[:, None, None] * gu, 0.0, 1.0)
        else:
            u_new = u
        alpha_new = _softmax(z_new)
        obj_new, costs_new, r_new = _objective(alpha_new, u_new, c, means,
                                               precisions, sigma, w)
        accept = obj_new <= obj
        z = np.where(accept[:, None], z_new, z)
        u = np.where(accept[:, None, None], u_new, u)
        alpha = np.where(accept[:, None], alpha_new, alpha)
        costs = np.where(accept[:, None], costs_new, costs)
        r = np.where(accept[:, None], r_new, r)
        last_gain = np.where(accept, obj - obj_new, last_gain)
        obj = np.where(accept, obj_new, obj)
        step = np.where(accept, step * 1.25, step * 0.5)
        done = (last_gain <= cfg.convergence_tol * np.maximum(1.0, np.abs(obj))) \
            | (step < 1e-10)
        if done.all():
            break
    converged = (last_gain <= cfg.convergence_tol * np.maximum(1.0, np.abs(obj))) \
        | (step < 1e-10)

    # exact one-hot corners are always in the candidate set
    corner_best_val = corner_vals[np.arange(p_pix), best_corner]
    use_corner = corner_best_val < obj
    if np.any(use_corner):
        onehot = np.zeros((p_pix, k))
        onehot[np.arange(p_pix), best_corner] = 1.0
        alpha = np.where(use_corner[:, None], onehot, alpha)
        u = np.where(use_corner[:, None, None], corner_u, u)
        obj = np.where(use_corner, corner_best_val, obj)
        converged = converged | use_corner
    return alpha, u, obj, converged, iters


def unmix_pixel(color, models: list[ColorModel], cfg: UnmixConfig | None = None) -> PixelUnmixResult:
    """Decompose one RGB color against the layer models."""
    cfg = cfg or UnmixConfig()
    c = np.asarray(color, dtype=np.float64).reshape(1, 3)
    if np.any(c < 0) or np.any(c > 1):
        raise ValueError("pixel color must lie in [0, 1]^3")
    alpha, u, obj, converged, _ = _unmix_batch(c, models, cfg)
    e = energy(alpha[0], u[0], models, cfg.sparsity_weight)
    residual = float(np.linalg.norm(np.einsum("k,ki->i", alpha[0], u[0]) - c[0]))
    return PixelUnmixResult(
        alphas=alpha[0].copy(),
        layer_colors=u[0].copy(),
        energy=e,
        objective=float(obj[0]),
        residual=residual,
        converged=bool(converged[0]),
    )


def unmix_image(image, models: list[ColorModel], cfg: UnmixConfig | None = None,
                palette: Palette | None = None) -> UnmixImageResult:
    """Apply per-pixel unmixing to every pixel of an (H, W, 3) image."""
    cfg = cfg or UnmixConfig()
    img = np.asarray(image, dtype=np.float64)
    h, w_, _ = img.shape
    c = img.reshape(-1, 3)
    alpha, u, obj, converged, iters = _unmix_batch(c, models, cfg)
    k = len(models)
    alphas = AlphaStack(alpha.T.reshape(k, h, w_).astype(np.float32), normalized=True)
    colors = u.transpose(1, 0, 2).reshape(k, h, w_, 3).astype(np.float32)
    if palette is None:
        palette = Palette(np.stack([m.mean for m in models]).astype(np.float32),
                          source="manual")
    layers = LayerStack(colors=colors, alphas=alphas.values, palette=palette)
    summary = UnmixSummary(pixels=c.shape[0],
                           non_converged=int((~converged).sum()),
                           iterations=iters)
    return UnmixImageResult(alphas=alphas, layers=layers, summary=summary)
