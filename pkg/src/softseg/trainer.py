"""Self-supervised joint training of the two predictors.

Per step: sample image crops, compute a per-crop palette by K-means, run
the alpha predictor, normalize, run the residue predictor, evaluate the
three-term objective (reconstruction + alpha regularization + distance),
backpropagate through both networks jointly, and take one Adam step.

All losses are means, so magnitudes are resolution independent. Gradients
here are the glue between the loss formulas and the network backward
passes; each formula's derivative is written out next to it.
"""

from __future__ import annotations

import json
import time
import warnings
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np
from PIL import Image as PILImage, UnidentifiedImageError

from .errors import DatasetError, TrainingDivergedError
from .models import ModelBundle, palette_planes
from .palette import Palette, extract_palette
from .tensor import AdamState, adam_step, clip_global_norm

NORMALIZE_EPS = 1e-8
LOG_HEADER = "step,loss_total,loss_r,loss_a,loss_d,seconds"
IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp"}


@dataclass
class TrainConfig:
    dataset_path: str = ""
    out_dir: str = "runs/default"
    k: int = 7
    lr: float = 2e-4  # the published 0.2 diverges here; still settable
    beta1: float = 0.0
    beta2: float = 0.99
    epsilon: float = 1e-8
    lambda_a: float = 1.0
    lambda_d: float = 0.5
    batch_size: int = 8
    crop_size: int = 64
    steps: int = 2000
    seed: int = 0
    checkpoint_interval: int = 500
    grad_clip: float = 5.0
    # training is many small GEMMs; BLAS thread fan-out loses to its own
    # sync overhead there, so default to one thread (0 = leave BLAS alone)
    blas_threads: int = 1

    def __post_init__(self):
        if self.lambda_a < 0 or self.lambda_d < 0:
            raise ValueError("loss coefficients must be nonnegative")
        if self.crop_size % 8:
            raise ValueError(f"crop_size must be divisible by 8, got {self.crop_size}")

    @classmethod
    def from_file(cls, path) -> "TrainConfig":
        text = Path(path).read_text()
        if text.lstrip().startswith("{"):
            raw = json.loads(text)
        else:
            raw = {}
            for lineno, line in enumerate(text.splitlines(), start=1):
                line = line.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise ValueError(f"config line {lineno}: expected 'key = value'")
                key, value = (part.strip() for part in line.split("=", 1))
                raw[key] = value.strip("\"'")
        known = {f.name: f.type for f in fields(cls)}
        kwargs = {}
        for key, value in raw.items():
            if key not in known:
                raise ValueError(f"unknown config key {key!r}")
            target = cls.__dataclass_fields__[key].default
            if isinstance(target, bool):
                kwargs[key] = str(value).lower() in ("1", "true", "yes")
            elif isinstance(target, int):
                kwargs[key] = int(value)
            elif isinstance(target, float):
                kwargs[key] = float(value)
            else:
                kwargs[key] = str(value)
        return cls(**kwargs)


@dataclass
class TrainSample:
    image: np.ndarray  # (crop, crop, 3) float32
    palette: Palette   # computed on this exact crop


# --- losses -----------------------------------------------------------------
# Batched layouts: alpha (N,K,H,W), u (N,K,3,H,W), palette (N,K,3), img (N,3,H,W)

def _recon_loss(alpha, u, img):
    n, k, h, w = alpha.shape
    recon = np.einsum("nkhw,nkchw->nchw", alpha, u)
    diff = recon - img
    loss = float(np.abs(diff).mean(dtype=np.float64))
    s = np.sign(diff) / diff.size
    dalpha = np.einsum("nchw,nkchw->nkhw", s, u)
    du = s[:, None] * alpha[:, :, None]
    return loss, dalpha, du


def _alpha_reg_loss(alpha, pal, img):
    recon = np.einsum("nkhw,nkc->nchw", alpha, pal)
    diff = recon - img
    loss = float(np.abs(diff).mean(dtype=np.float64))
    s = np.sign(diff) / diff.size
    dalpha = np.einsum("nchw,nkc->nkhw", s, pal)
    return loss, dalpha


def _distance_loss(alpha, pal, u):
    n, k, h, w = alpha.shape
    delta = u - pal[:, :, :, None, None]
    nrm = np.sqrt((delta ** 2).sum(axis=2))
    m = n * h * w
    loss = float((alpha * nrm).sum(dtype=np.float64) / m)
    dalpha = nrm / m
    safe = np.where(nrm > 1e-12, nrm, 1.0)
    du = (alpha / safe / m)[:, :, None] * delta
    du[np.broadcast_to((nrm <= 1e-12)[:, :, None], du.shape)] = 0.0
    return loss, dalpha, du


def loss_reconstruction(alphas, layer_colors, image) -> float:
    """Mean absolute error between the alpha-weighted layer colors and the image."""
    a, u, img = _to_batched(alphas, layer_colors, image)
    return _recon_loss(a, u, img)[0]


def loss_alpha_regularization(alphas, palette: Palette, image) -> float:
    """Reconstruction error using palette colors only (no residues)."""
    a = _alpha_nchw(alphas)
    img = np.asarray(image, dtype=np.float32).transpose(2, 0, 1)[None]
    return _alpha_reg_loss(a, palette.colors[None], img)[0]


def loss_distance(alphas, palette: Palette, layer_colors) -> float:
    """Alpha-weighted RGB distance between each layer's colors and its palette color."""
    a = _alpha_nchw(alphas)
    u = np.asarray(layer_colors, dtype=np.float32).transpose(0, 3, 1, 2)[None]
    return _distance_loss(a, palette.colors[None], u)[0]


def loss_total(alphas, layer_colors, palette: Palette, image,
               lambda_a: float = 1.0, lambda_d: float = 0.5) -> float:
    return (loss_reconstruction(alphas, layer_colors, image)
            + lambda_a * loss_alpha_regularization(alphas, palette, image)
            + lambda_d * loss_distance(alphas, palette, layer_colors))


def _alpha_nchw(alphas) -> np.ndarray:
    values = getattr(alphas, "values", alphas)
    return np.asarray(values, dtype=np.float32)[None]


def _to_batched(alphas, layer_colors, image):
    a = _alpha_nchw(alphas)
    u = np.asarray(layer_colors, dtype=np.float32).transpose(0, 3, 1, 2)[None]
    img = np.asarray(image, dtype=np.float32).transpose(2, 0, 1)[None]
    return a, u, img


# --- forward/backward through the full pipeline ------------------------------

def _alpha_input(images, palettes):
    n, _, h, w = images.shape
    planes = np.stack([palette_planes(Palette(p, source="manual"), h, w)
                       for p in palettes]).astype(images.dtype)
    return np.concatenate([images, planes], axis=1)


def _residue_input(images, palettes, alpha):
    n, _, h, w = images.shape
    k = alpha.shape[1]
    parts = [images]
    for i in range(k):
        plane = np.broadcast_to(palettes[:, i, :, None, None], (n, 3, h, w))
        parts.append(plane.astype(images.dtype, copy=False))
        parts.append(alpha[:, i:i + 1])
    return np.ascontiguousarray(np.concatenate(parts, axis=1))


def training_losses(bundle: ModelBundle, images: np.ndarray, palettes: np.ndarray,
                    lambda_a: float, lambda_d: float, train: bool = True,
                    update_stats: bool = True, compute_grads: bool = True):
    """Run both networks and the objective; optionally backpropagate.

    Returns (losses dict, grads dict or None, alpha, u).
    """
    n, _, h, w = images.shape
    k = bundle.k
    pal = palettes.astype(images.dtype)

    alpha_in = _alpha_input(images, palettes)
    raw = bundle.alpha_net.forward(alpha_in, train=train, update_stats=update_stats)
    ssum = raw.sum(axis=1, keepdims=True) + NORMALIZE_EPS
    alpha = raw / ssum

    res_in = _residue_input(images, pal, alpha)
    res_out = bundle.residue_net.forward(res_in, train=train, update_stats=update_stats)
    u_pre = res_out.reshape(n, k, 3, h, w) + pal[:, :, :, None, None]
    u = np.clip(u_pre, 0.0, 1.0)

    l_r, dalpha_r, du_r = _recon_loss(alpha, u, images)
    l_a, dalpha_a = _alpha_reg_loss(alpha, pal, images)
    l_d, dalpha_d, du_d = _distance_loss(alpha, pal, u)
    losses = {
        "loss_r": l_r,
        "loss_a": l_a,
        "loss_d": l_d,
        "loss_total": l_r + lambda_a * l_a + lambda_d * l_d,
    }
    if not compute_grads:
        return losses, None, alpha, u

    du = du_r + lambda_d * du_d
    du[(u_pre <= 0.0) | (u_pre >= 1.0)] = 0.0
    g_res_out = du.reshape(n, k * 3, h, w)
    g_res_in = bundle.residue_net.backward(g_res_out)

    dalpha = dalpha_r + lambda_a * dalpha_a + lambda_d * dalpha_d
    alpha_channel_idx = [3 + 4 * i + 3 for i in range(k)]
    dalpha += g_res_in[:, alpha_channel_idx]

    # backward through alpha_i = raw_i / (sum_j raw_j + eps)
    inner = (dalpha * raw).sum(axis=1, keepdims=True)
    draw = dalpha / ssum - inner / ssum ** 2
    bundle.alpha_net.backward(draw)
    return losses, bundle.grads(), alpha, u


# --- dataset ingestion --------------------------------------------------------

def _resize_shorter_side(img: PILImage.Image, target: int) -> PILImage.Image:
    w, h = img.size
    scale = target / min(w, h)
    new_w = max(target, int(round(w * scale)))
    new_h = max(target, int(round(h * scale)))
    if (new_w, new_h) == (w, h):
        return img
    return img.resize((new_w, new_h), PILImage.BILINEAR)


def list_dataset(path) -> list[Path]:
    root = Path(path)
    if not root.is_dir():
        raise DatasetError(f"dataset path {root} is not a directory")
    files = sorted(p for p in root.iterdir()
                   if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES)
    if not files:
        raise DatasetError(f"no images found in {root}")
    return files


def ingest_dataset(path, crop_size: int, seed: int = 0):
    """Infinite shuffled stream of (crop_size, crop_size, 3) float crops.

    Each image is resized so its shorter side equals crop_size, then a
    random window is cut. Unreadable files are skipped with a warning.
    """
    files = list_dataset(path)
    return _crop_stream(files, path, crop_size, seed)


def _crop_stream(files, path, crop_size, seed):
    rng = np.random.default_rng(seed)
    cache: dict[Path, np.ndarray] = {}
    bad: set[Path] = set()
    while True:
        order = rng.permutation(len(files))
        yielded = 0
        for idx in order:
            f = files[idx]
            if f in bad:
                continue
            if f not in cache:
                try:
                    with PILImage.open(f) as img:
                        resized = _resize_shorter_side(img.convert("RGB"), crop_size)
                        cache[f] = np.asarray(resized, dtype=np.float32) / 255.0
                except (UnidentifiedImageError, OSError) as exc:
                    warnings.warn(f"skipping unreadable image {f}: {exc}")
                    bad.add(f)
                    continue
            arr = cache[f]
            h, w = arr.shape[:2]
            top = int(rng.integers(0, h - crop_size + 1))
            left = int(rng.integers(0, w - crop_size + 1))
            yield arr[top:top + crop_size, left:left + crop_size].copy()
            yielded += 1
        if yielded == 0:
            raise DatasetError(f"no readable images in {path}")


# --- training loop --------------------------------------------------------------

@dataclass
class TrainResult:
    bundle: ModelBundle
    log: list[dict] = field(default_factory=list)
    weights_path: Path | None = None
    log_path: Path | None = None


def _blas_limit(n_threads: int):
    if n_threads <= 0:
        import contextlib

        return contextlib.nullcontext()
    try:
        from threadpoolctl import threadpool_limits

        return threadpool_limits(limits=n_threads, user_api="blas")
    except ImportError:
        import contextlib

        return contextlib.nullcontext()


def train(config: TrainConfig, progress=None) -> TrainResult:
    from .storage import save_weights  # deferred: storage imports models

    with _blas_limit(config.blas_threads):
        return _train_loop(config, progress, save_weights)


def _train_loop(config: TrainConfig, progress, save_weights) -> TrainResult:
    out_dir = Path(config.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(config.seed)
    bundle = ModelBundle(config.k, rng=rng)
    opt = AdamState(lr=config.lr, beta1=config.beta1, beta2=config.beta2,
                    epsilon=config.epsilon)
    stream = ingest_dataset(config.dataset_path, config.crop_size, seed=config.seed + 1)
    palette_rng = np.random.default_rng(config.seed + 2)

    log_path = out_dir / "train_log.csv"
    log_rows: list[dict] = []
    params = bundle.params()
    started = time.perf_counter()
    with open(log_path, "w") as log_file:
        log_file.write(LOG_HEADER + "\n")
        for step in range(config.steps):
            crops = [next(stream) for _ in range(config.batch_size)]
            palettes = np.stack([
                extract_palette(c, config.k, seed=int(palette_rng.integers(2 ** 31))).colors
                for c in crops])
            images = np.ascontiguousarray(
                np.stack([c.transpose(2, 0, 1) for c in crops]))
            losses, grads, _, _ = training_losses(
                bundle, images, palettes, config.lambda_a, config.lambda_d)
            if not np.isfinite(losses["loss_total"]):
                save_weights(out_dir / "last_good.sseg", bundle, opt)
                raise TrainingDivergedError(
                    f"loss became non-finite at step {step}; "
                    f"last good weights in {out_dir / 'last_good.sseg'}")
            if config.grad_clip > 0:
                clip_global_norm(grads, config.grad_clip)
            adam_step(params, grads, opt)
            row = {"step": step, **losses,
                   "seconds": time.perf_counter() - started}
            log_rows.append(row)
            log_file.write(f"{step},{losses['loss_total']:.6f},{losses['loss_r']:.6f},"
                           f"{losses['loss_a']:.6f},{losses['loss_d']:.6f},"
                           f"{row['seconds']:.3f}\n")
            if progress is not None:
                progress(row)
            if config.checkpoint_interval and (step + 1) % config.checkpoint_interval == 0:
                save_weights(out_dir / f"checkpoint_{step + 1:06d}.sseg", bundle, opt)
    weights_path = out_dir / "weights.sseg"
    save_weights(weights_path, bundle, opt)
    return TrainResult(bundle=bundle, log=log_rows, weights_path=weights_path,
                       log_path=log_path)
