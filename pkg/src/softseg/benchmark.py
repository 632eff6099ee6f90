"""Forward-pass timing: size scaling and compiled-vs-NumPy backend comparison.

Timed region is opacity estimation plus color estimation (normalization
included); image synthesis/loading stays outside the clock.
"""

from __future__ import annotations

import time

import numpy as np

from . import backend, layer_ops, models
from .palette import Palette


def _synthetic_image(size: int, seed: int = 0) -> np.ndarray:
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size] / size
    base = np.stack([xx, yy, (xx + yy) / 2], axis=2)
    noise = rng.normal(0, 0.05, size=(size, size, 3))
    return np.clip(base + noise, 0, 1).astype(np.float32)


def _default_palette(k: int) -> Palette:
    rng = np.random.default_rng(7)
    return Palette(rng.uniform(0.1, 0.9, size=(k, 3)).astype(np.float32), source="manual")


def time_decompose_core(image: np.ndarray, palette: Palette, bundle,
                        repeats: int = 3) -> float:
    """Best-of-N wall time of alpha estimation + normalization + color estimation."""
    best = float("inf")
    for _ in range(repeats):
        start = time.perf_counter()
        raw = models.predict_alpha(image, palette, bundle)
        alphas = layer_ops.normalize_alpha(raw)
        models.predict_residues(image, palette, alphas, bundle)
        best = min(best, time.perf_counter() - start)
    return best


def run_benchmark(sizes: list[int], weights_path: str | None = None, k: int = 7,
                  repeats: int = 3, compare_backends: bool = False) -> dict:
    if weights_path:
        from .storage import load_weights

        bundle, _, _ = load_weights(weights_path)
        k = bundle.k
    else:
        bundle = models.ModelBundle(k)
    palette = _default_palette(k)
    backends = list(backend.available_backends()) if compare_backends \
        else [backend.active_backend()]
    original = backend.active_backend()
    report = {"k": k, "threads": backend.num_threads(), "backends": {}}
    try:
        for name in backends:
            backend.set_backend(name)
            rows = []
            prev = None
            for size in sizes:
                image = _synthetic_image(size)
                seconds = time_decompose_core(image, palette, bundle, repeats=repeats)
                ratio = seconds / prev if prev else None
                rows.append({"size": size, "pixels": size * size,
                             "seconds": seconds, "ratio_vs_prev": ratio})
                prev = seconds
            report["backends"][name] = rows
    finally:
        backend.set_backend(original)
    return report


def format_report(report: dict) -> str:
    lines = [f"k={report['k']} threads={report['threads']}"]
    for name, rows in report["backends"].items():
        lines.append(f"backend: {name}")
        lines.append(f"  {'size':>6} {'pixels':>10} {'seconds':>10} {'xprev':>7}")
        for row in rows:
            ratio = f"{row['ratio_vs_prev']:.2f}" if row["ratio_vs_prev"] else "-"
            lines.append(f"  {row['size']:>6} {row['pixels']:>10} "
                         f"{row['seconds']:>10.3f} {ratio:>7}")
    return "\n".join(lines)
