"""Kernel backend selection.

Two interchangeable implementations of the patch packing/unpacking
primitives (im2col / col2im) sit behind this module: a compiled extension
(:mod:`softseg._imcol`, built from Cython) and a pure-NumPy fallback. The
compiled one is used automatically when it imported successfully and the
arrays are float32; everything else (including float64 gradient checking)
goes through NumPy. ``SOFTSEG_BACKEND=numpy|cython`` forces a choice,
``SOFTSEG_THREADS`` caps the extension's thread count.
"""

from __future__ import annotations

import os

import numpy as np

try:
    from . import _imcol as _ext
except ImportError:  # pure-Python install or failed build
    _ext = None

_VALID = ("cython", "numpy")
_backend = os.environ.get("SOFTSEG_BACKEND", "").strip().lower() or None
if _backend is not None and _backend not in _VALID:
    raise ValueError(f"SOFTSEG_BACKEND must be one of {_VALID}, got {_backend!r}")
if _backend == "cython" and _ext is None:
    raise ImportError("SOFTSEG_BACKEND=cython but the softseg._imcol extension is not built")
if _backend is None:
    _backend = "cython" if _ext is not None else "numpy"

_threads = max(1, int(os.environ.get("SOFTSEG_THREADS", os.cpu_count() or 1)))


def active_backend() -> str:
    """Name of the backend used for float32 kernels."""
    return _backend


def ext():
    """The compiled extension module (valid only when it imported)."""
    return _ext


def available_backends() -> tuple[str, ...]:
    return ("cython", "numpy") if _ext is not None else ("numpy",)


def set_backend(name: str) -> None:
    global _backend
    if name not in _VALID:
        raise ValueError(f"backend must be one of {_VALID}, got {name!r}")
    if name == "cython" and _ext is None:
        raise RuntimeError("softseg._imcol extension is not built")
    _backend = name


def num_threads() -> int:
    return _threads


def set_num_threads(n: int) -> None:
    global _threads
    _threads = max(1, int(n))


def out_spatial(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def _im2col_numpy(x: np.ndarray, kh: int, kw: int, stride: int, pad: int) -> np.ndarray:
    n, c, h, w = x.shape
    oh = out_spatial(h, kh, stride, pad)
    ow = out_spatial(w, kw, stride, pad)
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    cols = np.empty((n, c, kh, kw, oh, ow), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = x[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride]
    return cols.reshape(n, c * kh * kw, oh * ow)


def _col2im_numpy(cols: np.ndarray, out_hw: tuple[int, int],
                  kh: int, kw: int, stride: int, pad: int) -> np.ndarray:
    n = cols.shape[0]
    h, w = out_hw
    oh = out_spatial(h, kh, stride, pad)
    ow = out_spatial(w, kw, stride, pad)
    c = cols.shape[1] // (kh * kw)
    cols6 = cols.reshape(n, c, kh, kw, oh, ow)
    padded = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            padded[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += cols6[:, :, i, j]
    if pad:
        return np.ascontiguousarray(padded[:, :, pad:pad + h, pad:pad + w])
    return padded


def im2col(x: np.ndarray, kh: int, kw: int, stride: int, pad: int) -> np.ndarray:
    """Gather sliding windows of ``x`` (N,C,H,W) into (N, C*kh*kw, OH*OW)."""
    if _backend == "cython" and x.dtype == np.float32:
        n, c, h, w = x.shape
        oh = out_spatial(h, kh, stride, pad)
        ow = out_spatial(w, kw, stride, pad)
        cols = np.empty((n, c * kh * kw, oh * ow), dtype=np.float32)
        _ext.im2col_f32(np.ascontiguousarray(x), cols, kh, kw, stride, pad, _threads)
        return cols
    return _im2col_numpy(x, kh, kw, stride, pad)


def col2im(cols: np.ndarray, out_hw: tuple[int, int],
           kh: int, kw: int, stride: int, pad: int) -> np.ndarray:
    """Adjoint of :func:`im2col`: scatter-add columns back to (N,C,H,W)."""
    h, w = out_hw
    oh = out_spatial(h, kh, stride, pad)
    ow = out_spatial(w, kw, stride, pad)
    if cols.shape[2] != oh * ow:
        raise ValueError(f"col2im: cols spatial size {cols.shape[2]} does not match "
                         f"target {out_hw} (expected {oh}x{ow})")
    if _backend == "cython" and cols.dtype == np.float32:
        n = cols.shape[0]
        c = cols.shape[1] // (kh * kw)
        out = np.empty((n, c, h, w), dtype=np.float32)
        _ext.col2im_f32(np.ascontiguousarray(cols), out, kh, kw, stride, pad, _threads)
        return out
    return _col2im_numpy(cols, out_hw, kh, kw, stride, pad)
