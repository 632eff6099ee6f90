"""Alpha processing, compositing, recoloring, and the full decompose path."""

from __future__ import annotations

import numpy as np

from . import models as _models
from .palette import Palette
from .stacks import AlphaStack, LayerStack

NORMALIZE_EPS = 1e-8
GUIDED_FILTER_RADIUS = 4
GUIDED_FILTER_EPS = 1e-4


def normalize_alpha(stack: AlphaStack) -> AlphaStack:
    """Rescale each pixel's alphas to sum to one.

    Pixels whose alphas are all zero fall back to a uniform 1/K split.
    Idempotent and invariant to positive per-pixel scaling.
    """
    a = stack.values
    k = a.shape[0]
    sums = a.sum(axis=0, dtype=np.float64)
    out = a.astype(np.float64) / (sums + NORMALIZE_EPS)
    # exact renormalization; the epsilon cancels wherever the sum is positive
    exact = out.sum(axis=0)
    degenerate = sums <= 0.0
    out = np.where(degenerate, 1.0 / k, out / np.where(degenerate, 1.0, exact))
    return AlphaStack(out.astype(np.float32), normalized=True)


def compose(stack: LayerStack) -> np.ndarray:
    """Alpha-add composite: per-pixel sum of alpha-weighted layer colors."""
    return np.einsum("khw,khwc->hwc", stack.alphas, stack.colors).astype(np.float32)


def compose_palette_only(alphas: AlphaStack, palette: Palette) -> np.ndarray:
    """Composite using palette colors directly (no residues)."""
    return np.einsum("khw,kc->hwc", alphas.values, palette.colors).astype(np.float32)


def _box_sum(x: np.ndarray, radius: int) -> np.ndarray:
    """Sum of x over the window [i-r, i+r] x [j-r, j+r] clipped to the image."""
    h, w = x.shape[:2]
    cum = np.cumsum(np.cumsum(x, axis=0, dtype=np.float64), axis=1)
    cum = np.pad(cum, ((1, 0), (1, 0)) + ((0, 0),) * (x.ndim - 2))
    r = radius
    i0 = np.clip(np.arange(h) - r, 0, h)
    i1 = np.clip(np.arange(h) + r + 1, 0, h)
    j0 = np.clip(np.arange(w) - r, 0, w)
    j1 = np.clip(np.arange(w) + r + 1, 0, w)
    return (cum[np.ix_(i1, j1)] - cum[np.ix_(i0, j1)]
            - cum[np.ix_(i1, j0)] + cum[np.ix_(i0, j0)])


def guided_filter(alpha_layer: np.ndarray, guide: np.ndarray,
                  radius: int = GUIDED_FILTER_RADIUS,
                  eps: float = GUIDED_FILTER_EPS) -> np.ndarray:
    """Edge-preserving smoothing of one alpha layer using the image as guide.

    Local linear model per window (color guide, box windows clipped at the
    borders); output clamped to [0, 1].
    """
    if radius < 1:
        raise ValueError("radius must be >= 1")
    if eps <= 0:
        raise ValueError("eps must be positive")
    p = np.asarray(alpha_layer, dtype=np.float64)
    i = np.asarray(guide, dtype=np.float64)
    h, w = p.shape
    cnt = _box_sum(np.ones((h, w)), radius)
    mean_i = _box_sum(i, radius) / cnt[..., None]
    mean_p = _box_sum(p, radius) / cnt
    mean_ip = _box_sum(i * p[..., None], radius) / cnt[..., None]
    cov_ip = mean_ip - mean_i * mean_p[..., None]
    outer = i[..., :, None] * i[..., None, :]
    var_i = _box_sum(outer.reshape(h, w, 9), radius).reshape(h, w, 3, 3) / cnt[..., None, None]
    var_i -= mean_i[..., :, None] * mean_i[..., None, :]
    a = np.linalg.solve(var_i + eps * np.eye(3), cov_ip[..., None])[..., 0]
    b = mean_p - (a * mean_i).sum(axis=2)
    mean_a = _box_sum(a, radius) / cnt[..., None]
    mean_b = _box_sum(b, radius) / cnt
    q = (mean_a * i).sum(axis=2) + mean_b
    return np.clip(q, 0.0, 1.0).astype(np.float32)


def guided_filter_reference(alpha_layer: np.ndarray, guide: np.ndarray,
                            radius: int, eps: float) -> np.ndarray:
    """Direct per-pixel-window implementation; the oracle for guided_filter."""
    p = np.asarray(alpha_layer, dtype=np.float64)
    i = np.asarray(guide, dtype=np.float64)
    h, w = p.shape
    a = np.empty((h, w, 3))
    b = np.empty((h, w))
    eye = eps * np.eye(3)
    for y in range(h):
        y0, y1 = max(0, y - radius), min(h, y + radius + 1)
        for x in range(w):
            x0, x1 = max(0, x - radius), min(w, x + radius + 1)
            iw = i[y0:y1, x0:x1].reshape(-1, 3)
            pw = p[y0:y1, x0:x1].reshape(-1)
            mi = iw.mean(axis=0)
            mp = pw.mean()
            cov_ip = (iw * pw[:, None]).mean(axis=0) - mi * mp
            var_i = (iw[:, :, None] * iw[:, None, :]).mean(axis=0) - np.outer(mi, mi)
            ak = np.linalg.solve(var_i + eye, cov_ip)
            a[y, x] = ak
            b[y, x] = mp - ak @ mi
    q = np.empty((h, w))
    for y in range(h):
        y0, y1 = max(0, y - radius), min(h, y + radius + 1)
        for x in range(w):
            x0, x1 = max(0, x - radius), min(w, x + radius + 1)
            ma = a[y0:y1, x0:x1].reshape(-1, 3).mean(axis=0)
            mb = b[y0:y1, x0:x1].mean()
            q[y, x] = ma @ i[y, x] + mb
    return np.clip(q, 0.0, 1.0).astype(np.float32)


def apply_mask(stack: AlphaStack, layer_index: int, mask: np.ndarray,
               mode: str = "multiply") -> AlphaStack:
    """Edit one layer's alpha with a mask, then renormalize across layers."""
    k, h, w = stack.values.shape
    if not 0 <= layer_index < k:
        raise IndexError(f"layer index {layer_index} out of range for {k} layers")
    mask = np.asarray(mask, dtype=np.float32)
    if mask.shape != (h, w):
        raise ValueError(f"mask shape {mask.shape} does not match layers {(h, w)}")
    if mode not in ("multiply", "set"):
        raise ValueError(f"mask mode must be 'multiply' or 'set', got {mode!r}")
    values = stack.values.copy()
    if mode == "multiply":
        values[layer_index] *= mask
    else:
        values[layer_index] = mask
    return normalize_alpha(AlphaStack(values, normalized=False))


def merge_duplicate_layers(stack: LayerStack) -> LayerStack:
    """Merge layers whose palette colors are identical.

    The merged alpha is the group sum; the merged color is the alpha-weighted
    mean of the group's colors (plain mean where the group's alphas vanish),
    so the composite is unchanged.
    """
    pal = stack.palette.colors
    groups: dict[bytes, list[int]] = {}
    order: list[bytes] = []
    for idx in range(stack.k):
        key = pal[idx].tobytes()
        if key not in groups:
            groups[key] = []
            order.append(key)
        groups[key].append(idx)
    if all(len(groups[key]) == 1 for key in order):
        return stack

    new_alphas, new_colors, new_pal = [], [], []
    for key in order:
        idxs = groups[key]
        a = stack.alphas[idxs]
        u = stack.colors[idxs]
        merged_a = a.sum(axis=0)
        weighted = (a[..., None] * u).sum(axis=0)
        safe = merged_a > 1e-12
        fallback = u.mean(axis=0)
        merged_u = np.where(safe[..., None], weighted / np.maximum(merged_a, 1e-12)[..., None],
                            fallback)
        new_alphas.append(merged_a)
        new_colors.append(merged_u.astype(np.float32))
        new_pal.append(pal[idxs[0]])
    return LayerStack(colors=np.stack(new_colors), alphas=np.stack(new_alphas),
                      palette=Palette(np.stack(new_pal), source=stack.palette.source))


def recolor(stack: LayerStack, layer_index: int, new_color) -> np.ndarray:
    """Swap one layer's palette color, keep its residues, and recomposite."""
    if not 0 <= layer_index < stack.k:
        raise IndexError(f"layer index {layer_index} out of range for {stack.k} layers")
    new_color = np.asarray(new_color, dtype=np.float32).reshape(3)
    residues = stack.colors[layer_index] - stack.palette.colors[layer_index]
    new_layer = np.clip(new_color + residues, 0.0, 1.0)
    colors = stack.colors.copy()
    colors[layer_index] = new_layer
    recolored = LayerStack(colors=colors, alphas=stack.alphas, palette=stack.palette)
    return compose(recolored)


def decompose(image: np.ndarray, palette: Palette, bundle,
              use_guided_filter: bool = False,
              gf_radius: int = GUIDED_FILTER_RADIUS,
              gf_eps: float = GUIDED_FILTER_EPS,
              masks: list[tuple[int, np.ndarray, str]] | None = None) -> LayerStack:
    """Full inference: alpha prediction, normalization, optional alpha
    processing, then residue prediction and layer assembly.

    Alpha processing happens before color estimation, so the residue
    predictor always sees the edited (and re-normalized) opacities.
    """
    raw = _models.predict_alpha(image, palette, bundle)
    alphas = normalize_alpha(raw)
    if use_guided_filter:
        filtered = np.stack([guided_filter(alphas.values[i], image, gf_radius, gf_eps)
                             for i in range(alphas.k)])
        alphas = AlphaStack(filtered, normalized=False)
    for layer_index, mask, mode in masks or ():
        alphas = apply_mask(alphas, layer_index, mask, mode)
    if not alphas.normalized:
        alphas = normalize_alpha(alphas)
    residues = _models.predict_residues(image, palette, alphas, bundle)
    colors = _models.layer_colors(palette, residues)
    return LayerStack(colors=colors, alphas=alphas.values, palette=palette)
