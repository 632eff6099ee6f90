# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled convolution core.

Two layers of kernels live here:

* ``im2col_f32`` / ``col2im_f32``: standalone patch packing/unpacking,
  parallelized over disjoint channel rows (results are bitwise independent
  of the thread count).
* fused conv/deconv forward+backward: output rows are processed in blocks
  sized to stay cache resident; each block is packed and immediately fed
  to BLAS sgemm, avoiding the 9x materialization of a full column matrix.
"""

import numpy as np

cimport cython
from cython.parallel cimport prange
from scipy.linalg.cython_blas cimport sgemm

# scratch block target size (bytes); keeps pack+GEMM operands in cache
DEF BLOCK_BYTES = 1 << 23


cdef inline void _gemm_rm(char ta, char tb, int m, int n, int k, float alpha,
                          const float* a, int lda, const float* b, int ldb,
                          float beta, float* c, int ldc) noexcept nogil:
    # row-major C(m,n) = alpha * op(A)(m,k) @ op(B)(k,n) + beta * C
    # (column-major BLAS with swapped operands; ld arguments are the
    # row-major row strides of each buffer)
    sgemm(&tb, &ta, &n, &m, &k, &alpha, <float*> b, &ldb, <float*> a, &lda,
          &beta, c, &ldc)


def im2col_f32(float[:, :, :, ::1] x, float[:, :, ::1] cols,
               int kh, int kw, int stride, int pad, int threads):
    cdef Py_ssize_t N = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t OH = (H + 2 * pad - kh) // stride + 1
    cdef Py_ssize_t OW = (W + 2 * pad - kw) // stride + 1
    cdef Py_ssize_t rows = N * C * kh * kw
    cdef Py_ssize_t r, n, c, i, j, rem, oh, ow, ih, iw, ow_lo, ow_hi, base
    with nogil:
        for r in prange(rows, num_threads=threads, schedule='static'):
            n = r // (C * kh * kw)
            rem = r % (C * kh * kw)
            c = rem // (kh * kw)
            i = (rem % (kh * kw)) // kw
            j = rem % kw
            base = rem
            ow_lo = 0
            if j < pad:
                ow_lo = (pad - j + stride - 1) // stride
            ow_hi = (W - 1 + pad - j) // stride
            if ow_hi > OW - 1:
                ow_hi = OW - 1
            for oh in range(OH):
                ih = oh * stride + i - pad
                if ih < 0 or ih >= H:
                    for ow in range(OW):
                        cols[n, base, oh * OW + ow] = 0.0
                    continue
                for ow in range(ow_lo):
                    cols[n, base, oh * OW + ow] = 0.0
                for ow in range(ow_lo, ow_hi + 1):
                    iw = ow * stride + j - pad
                    cols[n, base, oh * OW + ow] = x[n, c, ih, iw]
                for ow in range(ow_hi + 1, OW):
                    cols[n, base, oh * OW + ow] = 0.0


def col2im_f32(float[:, :, ::1] cols, float[:, :, :, ::1] out,
               int kh, int kw, int stride, int pad, int threads):
    cdef Py_ssize_t N = out.shape[0], C = out.shape[1], H = out.shape[2], W = out.shape[3]
    cdef Py_ssize_t OH = (H + 2 * pad - kh) // stride + 1
    cdef Py_ssize_t OW = (W + 2 * pad - kw) // stride + 1
    cdef Py_ssize_t planes = N * C
    cdef Py_ssize_t pl, n, c, i, j, oh, ow, ih, iw, ow_lo, ow_hi, base
    with nogil:
        for pl in prange(planes, num_threads=threads, schedule='static'):
            n = pl // C
            c = pl % C
            for i in range(H):
                for j in range(W):
                    out[n, c, i, j] = 0.0
            for i in range(kh):
                for j in range(kw):
                    base = (c * kh + i) * kw + j
                    ow_lo = 0
                    if j < pad:
                        ow_lo = (pad - j + stride - 1) // stride
                    ow_hi = (W - 1 + pad - j) // stride
                    if ow_hi > OW - 1:
                        ow_hi = OW - 1
                    for oh in range(OH):
                        ih = oh * stride + i - pad
                        if ih < 0 or ih >= H:
                            continue
                        for ow in range(ow_lo, ow_hi + 1):
                            iw = ow * stride + j - pad
                            out[n, c, ih, iw] += cols[n, base, oh * OW + ow]


cdef inline void _pack_rows(const float* xs, float* cols, Py_ssize_t C,
                            Py_ssize_t H, Py_ssize_t W, Py_ssize_t OW,
                            Py_ssize_t kh, Py_ssize_t kw, Py_ssize_t stride,
                            Py_ssize_t pad, Py_ssize_t r0, Py_ssize_t r1) noexcept nogil:
    """im2col for one sample's output rows [r0, r1) into a (C*kh*kw, bs*OW)
    contiguous scratch block."""
    cdef Py_ssize_t bs_cols = (r1 - r0) * OW
    cdef Py_ssize_t c, i, j, oh, ow, ih, iw, ow_lo, ow_hi, row, off
    cdef const float* src
    cdef float* dst
    for c in range(C):
        for i in range(kh):
            for j in range(kw):
                row = (c * kh + i) * kw + j
                dst = cols + row * bs_cols
                ow_lo = 0
                if j < pad:
                    ow_lo = (pad - j + stride - 1) // stride
                ow_hi = (W - 1 + pad - j) // stride
                if ow_hi > OW - 1:
                    ow_hi = OW - 1
                for oh in range(r0, r1):
                    ih = oh * stride + i - pad
                    off = (oh - r0) * OW
                    if ih < 0 or ih >= H:
                        for ow in range(OW):
                            dst[off + ow] = 0.0
                        continue
                    src = xs + c * H * W + ih * W
                    for ow in range(ow_lo):
                        dst[off + ow] = 0.0
                    for ow in range(ow_lo, ow_hi + 1):
                        dst[off + ow] = src[ow * stride + j - pad]
                    for ow in range(ow_hi + 1, OW):
                        dst[off + ow] = 0.0


cdef inline void _scatter_rows(const float* cols, float* xs, Py_ssize_t C,
                               Py_ssize_t H, Py_ssize_t W, Py_ssize_t OW,
                               Py_ssize_t kh, Py_ssize_t kw, Py_ssize_t stride,
                               Py_ssize_t pad, Py_ssize_t r0, Py_ssize_t r1) noexcept nogil:
    """Adjoint of _pack_rows: scatter-add a block back into one sample."""
    cdef Py_ssize_t bs_cols = (r1 - r0) * OW
    cdef Py_ssize_t c, i, j, oh, ow, ih, ow_lo, ow_hi, row, off
    cdef const float* src
    cdef float* dst
    for c in range(C):
        for i in range(kh):
            for j in range(kw):
                row = (c * kh + i) * kw + j
                src = cols + row * bs_cols
                ow_lo = 0
                if j < pad:
                    ow_lo = (pad - j + stride - 1) // stride
                ow_hi = (W - 1 + pad - j) // stride
                if ow_hi > OW - 1:
                    ow_hi = OW - 1
                for oh in range(r0, r1):
                    ih = oh * stride + i - pad
                    if ih < 0 or ih >= H:
                        continue
                    off = (oh - r0) * OW
                    dst = xs + c * H * W + ih * W
                    for ow in range(ow_lo, ow_hi + 1):
                        dst[ow * stride + j - pad] += src[off + ow]


cdef inline Py_ssize_t _block_rows(Py_ssize_t ckk, Py_ssize_t ow) noexcept nogil:
    cdef Py_ssize_t rows = BLOCK_BYTES // (ckk * ow * sizeof(float))
    if rows < 1:
        rows = 1
    return rows


def conv2d_forward_f32(float[:, :, :, ::1] x, float[:, ::1] w2, float[::1] bias,
                       float[:, :, :, ::1] y, int kh, int kw, int stride, int pad):
    cdef Py_ssize_t N = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t Cout = y.shape[1], OH = y.shape[2], OW = y.shape[3]
    cdef Py_ssize_t CKK = C * kh * kw
    cdef Py_ssize_t bs = _block_rows(CKK, OW)
    scratch = np.empty(CKK * bs * OW, dtype=np.float32)
    cdef float[::1] cols = scratch
    cdef Py_ssize_t n, r0, r1, co, t
    cdef Py_ssize_t cur
    cdef const float* xs
    cdef float* ys
    with nogil:
        for n in range(N):
            xs = &x[n, 0, 0, 0]
            ys = &y[n, 0, 0, 0]
            r0 = 0
            while r0 < OH:
                r1 = r0 + bs
                if r1 > OH:
                    r1 = OH
                cur = (r1 - r0) * OW
                _pack_rows(xs, &cols[0], C, H, W, OW, kh, kw, stride, pad, r0, r1)
                _gemm_rm(b'N', b'N', <int> Cout, <int> cur, <int> CKK, 1.0,
                         &w2[0, 0], <int> CKK, &cols[0], <int> cur,
                         0.0, ys + r0 * OW, <int> (OH * OW))
                r0 = r1
            for co in range(Cout):
                for t in range(OH * OW):
                    ys[co * OH * OW + t] += bias[co]


def conv2d_backward_f32(float[:, :, :, ::1] gy, float[:, :, :, ::1] x,
                        float[:, ::1] w2, float[:, :, :, ::1] gx,
                        float[:, ::1] gw2, float[::1] gb,
                        int kh, int kw, int stride, int pad):
    cdef Py_ssize_t N = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t Cout = gy.shape[1], OH = gy.shape[2], OW = gy.shape[3]
    cdef Py_ssize_t CKK = C * kh * kw
    cdef Py_ssize_t bs = _block_rows(CKK, OW)
    scratch = np.empty(2 * CKK * bs * OW, dtype=np.float32)
    cdef float[::1] buf = scratch
    cdef float* cols
    cdef float* gcols
    cdef Py_ssize_t n, r0, r1, co, t, i
    cdef Py_ssize_t cur
    cdef const float* gys
    cdef const float* xs
    cdef float* gxs
    cols = &buf[0]
    gcols = &buf[CKK * bs * OW]
    with nogil:
        for i in range(Cout * CKK):
            (&gw2[0, 0])[i] = 0.0
        for co in range(Cout):
            gb[co] = 0.0
        for i in range(N * C * H * W):
            (&gx[0, 0, 0, 0])[i] = 0.0
        for n in range(N):
            xs = &x[n, 0, 0, 0]
            gys = &gy[n, 0, 0, 0]
            gxs = &gx[n, 0, 0, 0]
            r0 = 0
            while r0 < OH:
                r1 = r0 + bs
                if r1 > OH:
                    r1 = OH
                cur = (r1 - r0) * OW
                _pack_rows(xs, cols, C, H, W, OW, kh, kw, stride, pad, r0, r1)
                # gw2 += gy_block @ cols_block^T
                _gemm_rm(b'N', b'T', <int> Cout, <int> CKK, <int> cur, 1.0,
                         gys + r0 * OW, <int> (OH * OW), cols, <int> cur,
                         1.0, &gw2[0, 0], <int> CKK)
                # gcols_block = w2^T @ gy_block
                _gemm_rm(b'T', b'N', <int> CKK, <int> cur, <int> Cout, 1.0,
                         &w2[0, 0], <int> CKK, gys + r0 * OW, <int> (OH * OW),
                         0.0, gcols, <int> cur)
                _scatter_rows(gcols, gxs, C, H, W, OW, kh, kw, stride, pad, r0, r1)
                r0 = r1
            for co in range(Cout):
                for t in range(OH * OW):
                    gb[co] += gys[co * OH * OW + t]


def deconv2d_forward_f32(float[:, :, :, ::1] x, float[:, ::1] wd2, float[::1] bias,
                         float[:, :, :, ::1] y, int kh, int kw, int stride, int pad):
    # wd2: (Cin, Cout*kh*kw); y spatial = x spatial * stride
    cdef Py_ssize_t N = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t Cout = y.shape[1], HO = y.shape[2], WO = y.shape[3]
    cdef Py_ssize_t OKK = Cout * kh * kw
    cdef Py_ssize_t bs = _block_rows(OKK, W)
    scratch = np.empty(OKK * bs * W, dtype=np.float32)
    cdef float[::1] cols = scratch
    cdef Py_ssize_t n, r0, r1, co, t
    cdef Py_ssize_t cur
    cdef const float* xs
    cdef float* ys
    with nogil:
        for n in range(N):
            xs = &x[n, 0, 0, 0]
            ys = &y[n, 0, 0, 0]
            for co in range(Cout):
                for t in range(HO * WO):
                    ys[co * HO * WO + t] = bias[co]
            r0 = 0
            while r0 < H:
                r1 = r0 + bs
                if r1 > H:
                    r1 = H
                cur = (r1 - r0) * W
                # cols_block = wd2^T @ x_block
                _gemm_rm(b'T', b'N', <int> OKK, <int> cur, <int> C, 1.0,
                         &wd2[0, 0], <int> OKK, xs + r0 * W, <int> (H * W),
                         0.0, &cols[0], <int> cur)
                # adjoint gather positions: scatter into the upsampled output
                _scatter_rows(&cols[0], ys, Cout, HO, WO, W, kh, kw, stride,
                              pad, r0, r1)
                r0 = r1


def deconv2d_backward_f32(float[:, :, :, ::1] gy, float[:, :, :, ::1] x,
                          float[:, ::1] wd2, float[:, :, :, ::1] gx,
                          float[:, ::1] gwd2, float[::1] gb,
                          int kh, int kw, int stride, int pad):
    cdef Py_ssize_t N = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t Cout = gy.shape[1], HO = gy.shape[2], WO = gy.shape[3]
    cdef Py_ssize_t OKK = Cout * kh * kw
    cdef Py_ssize_t bs = _block_rows(OKK, W)
    scratch = np.empty(OKK * bs * W, dtype=np.float32)
    cdef float[::1] gcols = scratch
    cdef Py_ssize_t n, r0, r1, co, t, i
    cdef Py_ssize_t cur
    cdef const float* gys
    cdef const float* xs
    cdef float* gxs
    with nogil:
        for i in range(C * OKK):
            (&gwd2[0, 0])[i] = 0.0
        for co in range(Cout):
            gb[co] = 0.0
        for n in range(N):
            xs = &x[n, 0, 0, 0]
            gys = &gy[n, 0, 0, 0]
            gxs = &gx[n, 0, 0, 0]
            r0 = 0
            while r0 < H:
                r1 = r0 + bs
                if r1 > H:
                    r1 = H
                cur = (r1 - r0) * W
                _pack_rows(gys, &gcols[0], Cout, HO, WO, W, kh, kw, stride,
                           pad, r0, r1)
                # gx_block = wd2 @ gcols_block
                _gemm_rm(b'N', b'N', <int> C, <int> cur, <int> OKK, 1.0,
                         &wd2[0, 0], <int> OKK, &gcols[0], <int> cur,
                         0.0, gxs + r0 * W, <int> (H * W))
                # gwd2 += x_block @ gcols_block^T
                _gemm_rm(b'N', b'T', <int> C, <int> OKK, <int> cur, 1.0,
                         xs + r0 * W, <int> (H * W), &gcols[0], <int> cur,
                         1.0, &gwd2[0, 0], <int> OKK)
                r0 = r1
            for co in range(Cout):
                for t in range(HO * WO):
                    gb[co] += gys[co * HO * WO + t]
