"""Convolution kernels: fused compiled path with a NumPy im2col fallback.

Forward and backward maps for strided cross-correlation and its transpose.
The transpose pair is wired so that ``deconv2d_forward`` is exactly the
adjoint of ``conv2d_forward`` with the same kernel, which the tests verify
via inner products. Output geometry: conv maps H -> (H + 2p - k)//s + 1,
deconv maps H -> H*s (the extra output row/column implied by stride 2 is
part of the contract, not a caller knob).

float32 inputs run through the compiled blocked kernels when the extension
is available; float64 (gradient checking) and pure-Python installs use the
NumPy implementation.
"""

from __future__ import annotations

import numpy as np

from . import backend
from .errors import ShapeError

# NumPy path: above this many column-matrix elements, single-sample forward
# passes run in output-row blocks to bound transient memory (~256 MB f32).
_CHUNK_ELEMS = 64 * 1024 * 1024


def _use_ext(*arrays) -> bool:
    return (backend.active_backend() == "cython"
            and all(a.dtype == np.float32 for a in arrays))


def _c(a: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(a)


def conv2d_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray | None,
                   stride: int, pad: int) -> np.ndarray:
    n, cin, h, ww = x.shape
    cout, cin_w, kh, kw = w.shape
    if cin != cin_w:
        raise ShapeError(f"conv2d: input has {cin} channels, kernel expects {cin_w}")
    oh = backend.out_spatial(h, kh, stride, pad)
    ow = backend.out_spatial(ww, kw, stride, pad)
    if b is None:
        b = np.zeros(cout, dtype=x.dtype)
    if _use_ext(x, w, b):
        y = np.empty((n, cout, oh, ow), dtype=np.float32)
        backend.ext().conv2d_forward_f32(_c(x), _c(w.reshape(cout, -1)), _c(b), y,
                                         kh, kw, stride, pad)
        return y
    w2 = w.reshape(cout, cin * kh * kw)
    if n * cin * kh * kw * oh * ow > _CHUNK_ELEMS and n == 1:
        return _conv2d_forward_chunked(x, w2, b, (cout, oh, ow), kh, kw, stride, pad)
    cols = backend.im2col(x, kh, kw, stride, pad)
    y = np.matmul(w2, cols)
    y += b[:, None]
    return y.reshape(n, cout, oh, ow)


def _conv2d_forward_chunked(x, w2, b, out_chw, kh, kw, stride, pad):
    cout, oh, ow = out_chw
    cin = x.shape[1]
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    y = np.empty((1, cout, oh, ow), dtype=x.dtype)
    rows_per_chunk = max(1, _CHUNK_ELEMS // (cin * kh * kw * ow))
    for r0 in range(0, oh, rows_per_chunk):
        r1 = min(oh, r0 + rows_per_chunk)
        xs = xp[:, :, r0 * stride:(r1 - 1) * stride + kh, :]
        cols = backend.im2col(np.ascontiguousarray(xs), kh, kw, stride, 0)
        y[:, :, r0:r1, :] = np.matmul(w2, cols).reshape(1, cout, r1 - r0, ow)
    y += b[None, :, None, None]
    return y


def conv2d_backward(gy: np.ndarray, x: np.ndarray, w: np.ndarray,
                    stride: int, pad: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients (gx, gw, gb) of a scalar loss through conv2d_forward."""
    n, cin, h, ww = x.shape
    cout, _, kh, kw = w.shape
    if _use_ext(gy, x, w):
        gx = np.empty_like(x)
        gw2 = np.empty((cout, cin * kh * kw), dtype=np.float32)
        gb = np.empty(cout, dtype=np.float32)
        backend.ext().conv2d_backward_f32(_c(gy), _c(x), _c(w.reshape(cout, -1)),
                                          gx, gw2, gb, kh, kw, stride, pad)
        return gx, gw2.reshape(w.shape), gb
    g2 = gy.reshape(n, cout, -1)
    cols = backend.im2col(x, kh, kw, stride, pad)
    gw = np.matmul(g2, cols.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
    gb = gy.sum(axis=(0, 2, 3))
    gcols = np.matmul(w.reshape(cout, -1).T, g2)
    gx = backend.col2im(gcols, (h, ww), kh, kw, stride, pad)
    return gx, gw, gb


def deconv2d_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray | None,
                     stride: int, pad: int) -> np.ndarray:
    n, cin, h, ww = x.shape
    cin_w, cout, kh, kw = w.shape
    if cin != cin_w:
        raise ShapeError(f"deconv2d: input has {cin} channels, kernel expects {cin_w}")
    if b is None:
        b = np.zeros(cout, dtype=x.dtype)
    if _use_ext(x, w, b):
        y = np.empty((n, cout, h * stride, ww * stride), dtype=np.float32)
        backend.ext().deconv2d_forward_f32(_c(x), _c(w.reshape(cin, -1)), _c(b), y,
                                           kh, kw, stride, pad)
        return y
    cols = np.matmul(w.reshape(cin, -1).T, x.reshape(n, cin, h * ww))
    y = backend.col2im(cols, (h * stride, ww * stride), kh, kw, stride, pad)
    y += b[None, :, None, None]
    return y


def deconv2d_backward(gy: np.ndarray, x: np.ndarray, w: np.ndarray,
                      stride: int, pad: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    n, cin, h, ww = x.shape
    _, cout, kh, kw = w.shape
    if _use_ext(gy, x, w):
        gx = np.empty_like(x)
        gw2 = np.empty((cin, cout * kh * kw), dtype=np.float32)
        gb = np.empty(cout, dtype=np.float32)
        backend.ext().deconv2d_backward_f32(_c(gy), _c(x), _c(w.reshape(cin, -1)),
                                            gx, gw2, gb, kh, kw, stride, pad)
        return gx, gw2.reshape(w.shape), gb
    gcols = backend.im2col(gy, kh, kw, stride, pad)
    gx = np.matmul(w.reshape(cin, -1), gcols).reshape(n, cin, h, ww)
    gw = np.matmul(x.reshape(n, cin, -1), gcols.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
    gb = gy.sum(axis=(0, 2, 3))
    return gx, gw, gb
