# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled kernels for conv2d, circular conv, and pixel-wise correlation.

Same accumulation contract as kernels_numpy: float64 accumulators, taps
added per output element in (ci, kh, kw) order for conv2d, (ci, r) for
circ_conv1d, ascending channel for pixcorr, one float32 cast at the end.
float32 products are exact in float64, so the compiler may fuse
multiply-adds without changing bits; only the addition sequence matters,
and the loops below fix it. No -ffast-math.

The inner loops live in small verbatim-C helpers with restrict-qualified
pointers and `#pragma omp simd`, so the float32->float64 convert+FMA
streams vectorize. Each helper touches one tap (or one fixed tap chain)
for a whole row of output elements; the per-element tap sequence stays
the contractual one. Circular indexing is unwrapped into an extended
copy of the ring so the helpers stay unit-stride.

Weight-gradient reductions use 8 partial accumulators combined in a
fixed order: deterministic, but ordered differently from numpy, hence
backward parity is approximate rather than bit-exact. Parallel loops
split over output channels (forward, weight grads) or input channels
(input grads); every accumulator, including the dot-product partials
(function-local in C), is owned by exactly one thread, so results do
not depend on the thread count.
"""

import numpy as np

cimport numpy as cnp
from cython.parallel cimport prange

cnp.import_array()

from ..errors import ShapeError


cdef extern from *:
    """
    /* One tap streamed over a row of output elements: o[j] += w * x[j*sx].
       Per-element accumulation order is set by the call sequence.
       noinline keeps these bodies out of the OpenMP-outlined loop
       functions, where inlining strips the restrict qualifiers and the
       vectorizer falls back to scalar code. */
    __attribute__((noinline)) static void ps_tap_f64(double* restrict o, const float* restrict x,
                           const double w, const int n, const int sx) {
        int j;
        if (sx == 1) {
            #pragma omp simd
            for (j = 0; j < n; ++j) o[j] += w * (double) x[j];
        } else {
            #pragma omp simd
            for (j = 0; j < n; ++j) o[j] += w * (double) x[j * sx];
        }
    }

    /* Nine taps per element in one sweep, r ascending within each element:
       o[p] += sum_{r=0..8} w[r] * f[p + r*d]. */
    __attribute__((noinline)) static void ps_circ9_f64(double* restrict o, const float* restrict f,
                             const double* restrict w, const int n, const int d) {
        int p;
        #pragma omp simd
        for (p = 0; p < n; ++p) {
            double a = o[p];
            a += w[0] * (double) f[p];
            a += w[1] * (double) f[p + d];
            a += w[2] * (double) f[p + 2 * d];
            a += w[3] * (double) f[p + 3 * d];
            a += w[4] * (double) f[p + 4 * d];
            a += w[5] * (double) f[p + 5 * d];
            a += w[6] * (double) f[p + 6 * d];
            a += w[7] * (double) f[p + 7 * d];
            a += w[8] * (double) f[p + 8 * d];
            o[p] = a;
        }
    }

    /* All nine taps of a 3x3 kernel for one output row, (ki, kj) ascending
       per element; r0..r2 are the three contributing input rows. */
    __attribute__((noinline)) static void ps_conv3x3_f64(
            double* restrict o, const float* restrict r0,
            const float* restrict r1, const float* restrict r2,
            const double* restrict w, const int n, const int sx) {
        int j;
        if (sx == 1) {
            #pragma omp simd
            for (j = 0; j < n; ++j) {
                double a = o[j];
                a += w[0] * (double) r0[j];
                a += w[1] * (double) r0[j + 1];
                a += w[2] * (double) r0[j + 2];
                a += w[3] * (double) r1[j];
                a += w[4] * (double) r1[j + 1];
                a += w[5] * (double) r1[j + 2];
                a += w[6] * (double) r2[j];
                a += w[7] * (double) r2[j + 1];
                a += w[8] * (double) r2[j + 2];
                o[j] = a;
            }
        } else {
            #pragma omp simd
            for (j = 0; j < n; ++j) {
                double a = o[j];
                a += w[0] * (double) r0[j * sx];
                a += w[1] * (double) r0[j * sx + 1];
                a += w[2] * (double) r0[j * sx + 2];
                a += w[3] * (double) r1[j * sx];
                a += w[4] * (double) r1[j * sx + 1];
                a += w[5] * (double) r1[j * sx + 2];
                a += w[6] * (double) r2[j * sx];
                a += w[7] * (double) r2[j * sx + 1];
                a += w[8] * (double) r2[j * sx + 2];
                o[j] = a;
            }
        }
    }

    /* Strided scatter counterpart of ps_tap_f64: o[j*so] += w * x[j]. */
    __attribute__((noinline)) static void ps_tap_scatter_f64(double* restrict o, const float* restrict x,
                                   const double w, const int n, const int so) {
        int j;
        #pragma omp simd
        for (j = 0; j < n; ++j) o[j * so] += w * (double) x[j];
    }

    /* Dot product over 8 independent partial sums combined in a fixed
       order; locals keep it thread-safe under OpenMP. */
    __attribute__((noinline)) static double ps_dot8_f64(const float* restrict a, const float* restrict b,
                              const int n, const int sb) {
        double part[8] = {0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0};
        const int tail = n - (n % 8);
        double acc = 0.0;
        int j, u;
        if (sb == 1) {
            for (j = 0; j < tail; j += 8)
                for (u = 0; u < 8; ++u)
                    part[u] += (double) a[j + u] * (double) b[j + u];
            for (j = tail; j < n; ++j)
                part[j - tail] += (double) a[j] * (double) b[j];
        } else {
            for (j = 0; j < tail; j += 8)
                for (u = 0; u < 8; ++u)
                    part[u] += (double) a[j + u] * (double) b[(j + u) * sb];
            for (j = tail; j < n; ++j)
                part[j - tail] += (double) a[j] * (double) b[j * sb];
        }
        for (u = 0; u < 8; ++u) acc += part[u];
        return acc;
    }
    """
    void ps_tap_f64(double* o, const float* x, double w, int n, int sx) nogil
    void ps_conv3x3_f64(double* o, const float* r0, const float* r1,
                        const float* r2, const double* w, int n, int sx) nogil
    void ps_tap_scatter_f64(double* o, const float* x, double w, int n, int so) nogil
    void ps_circ9_f64(double* o, const float* f, const double* w, int n, int d) nogil
    double ps_dot8_f64(const float* a, const float* b, int n, int sb) nogil


def _pad2d(x, int p):
    if p == 0:
        return np.ascontiguousarray(x)
    return np.pad(x, ((0, 0), (p, p), (p, p)))


def conv2d_fwd(x, w, b, int stride, int padding):
    cdef int cin = x.shape[0], h = x.shape[1], wd = x.shape[2]
    cdef int cout = w.shape[0], kh = w.shape[2], kw = w.shape[3]
    if w.shape[1] != cin:
        raise ShapeError(f"conv2d channels: input {cin} vs kernel {w.shape[1]}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError("conv2d kernel dims must be odd")
    cdef int ho = (h + 2 * padding - kh) // stride + 1
    cdef int wo = (wd + 2 * padding - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError("conv2d output would be empty")
    cdef float[:, :, ::1] xp = _pad2d(np.asarray(x, dtype=np.float32), padding)
    w64_arr = np.ascontiguousarray(w, dtype=np.float32).astype(np.float64)
    cdef double[:, :, :, ::1] w64 = w64_arr
    cdef float[::1] bv = np.ascontiguousarray(b, dtype=np.float32)
    out64_arr = np.empty((cout, ho, wo), dtype=np.float64)
    cdef double[:, :, ::1] out64 = out64_arr
    cdef int co, ci, ki, kj, i, j
    cdef double bias
    cdef double* orow
    with nogil:
        for co in prange(cout, schedule="static"):
            bias = <double> bv[co]
            for i in range(ho):
                orow = &out64[co, i, 0]
                for j in range(wo):
                    orow[j] = bias
            for ci in range(cin):
                if kh == 3 and kw == 3:
                    for i in range(ho):
                        ps_conv3x3_f64(&out64[co, i, 0],
                                       &xp[ci, i * stride, 0],
                                       &xp[ci, i * stride + 1, 0],
                                       &xp[ci, i * stride + 2, 0],
                                       &w64[co, ci, 0, 0], wo, stride)
                else:
                    for ki in range(kh):
                        for kj in range(kw):
                            for i in range(ho):
                                ps_tap_f64(&out64[co, i, 0],
                                           &xp[ci, i * stride + ki, kj],
                                           w64[co, ci, ki, kj], wo, stride)
    return out64_arr.astype(np.float32)


def conv2d_bwd_input(g, w, x_shape, int stride, int padding):
    cdef int cin = x_shape[0], h = x_shape[1], wd = x_shape[2]
    cdef int cout = w.shape[0], kh = w.shape[2], kw = w.shape[3]
    cdef int ho = g.shape[1], wo = g.shape[2]
    cdef int hp = h + 2 * padding, wp = wd + 2 * padding
    cdef float[:, :, :, ::1] wv = np.ascontiguousarray(w, dtype=np.float32)
    dxp_arr = np.zeros((cin, hp, wp), dtype=np.float64)
    cdef double[:, :, ::1] dxp = dxp_arr
    cdef float[:, :, ::1] gv
    cdef float[:, :, ::1] gp
    cdef int co, ci, ki, kj, i, a
    cdef double wval
    if stride == 1:
        # gather form: dx[a,b] = sum_{co,ki,kj} w[co,ci,ki,kj] * gpad[co, a+kh-1-ki, b+kw-1-kj]
        gp_arr = np.zeros((cout, ho + 2 * (kh - 1), wo + 2 * (kw - 1)), dtype=np.float32)
        gp_arr[:, kh - 1 : kh - 1 + ho, kw - 1 : kw - 1 + wo] = g
        gp = gp_arr
        with nogil:
            for ci in prange(cin, schedule="static"):
                for co in range(cout):
                    for ki in range(kh):
                        for kj in range(kw):
                            wval = <double> wv[co, ci, ki, kj]
                            for a in range(hp):
                                ps_tap_f64(&dxp[ci, a, 0],
                                           &gp[co, a + kh - 1 - ki, kw - 1 - kj],
                                           wval, wp, 1)
    else:
        gv = np.ascontiguousarray(g, dtype=np.float32)
        with nogil:
            for ci in prange(cin, schedule="static"):
                for co in range(cout):
                    for ki in range(kh):
                        for kj in range(kw):
                            wval = <double> wv[co, ci, ki, kj]
                            for i in range(ho):
                                # dxp[ci, i*stride+ki, kj + j*stride] += w * g[co,i,j]
                                ps_tap_scatter_f64(&dxp[ci, i * stride + ki, kj],
                                                   &gv[co, i, 0], wval, wo, stride)
    if padding:
        dxp_arr = dxp_arr[:, padding:-padding, padding:-padding]
    return dxp_arr.astype(np.float32)


def conv2d_bwd_weight(g, x, w_shape, int stride, int padding):
    cdef int cout = w_shape[0], cin = w_shape[1], kh = w_shape[2], kw = w_shape[3]
    cdef int ho = g.shape[1], wo = g.shape[2]
    cdef float[:, :, ::1] xp = _pad2d(np.asarray(x, dtype=np.float32), padding)
    cdef float[:, :, ::1] gv = np.ascontiguousarray(g, dtype=np.float32)
    dw_arr = np.empty((cout, cin, kh, kw), dtype=np.float64)
    cdef double[:, :, :, ::1] dw = dw_arr
    cdef int co, ci, ki, kj, i
    cdef double acc
    with nogil:
        for co in prange(cout, schedule="static"):
            for ci in range(cin):
                for ki in range(kh):
                    for kj in range(kw):
                        acc = 0.0
                        for i in range(ho):
                            acc = acc + ps_dot8_f64(&gv[co, i, 0],
                                                    &xp[ci, i * stride + ki, kj],
                                                    wo, stride)
                        dw[co, ci, ki, kj] = acc
    return dw_arr.astype(np.float32)


def _ring_extend(arr, int ext):
    """[C,K] -> [C,K+ext] where col u holds arr[:, (u - ext//2 offsetting) ...]

    Concretely ext = (taps-1)*dilation and column u maps to
    arr[:, (u - radius*dilation) mod K], so tap r of output p reads
    extended column p + r*dilation without any wrapping.
    """
    cdef int k = arr.shape[1]
    idx = np.mod(np.arange(k + ext) - ext // 2, k)
    return np.ascontiguousarray(arr[:, idx])


def circ_conv1d_fwd(f, w, b, int dilation):
    cdef int c = f.shape[0], k = f.shape[1]
    cdef int cout = w.shape[0], taps = w.shape[2]
    if w.shape[1] != c:
        raise ShapeError(f"circ_conv1d channels: input {c} vs kernel {w.shape[1]}")
    if taps % 2 == 0:
        raise ShapeError("circ_conv1d kernel width must be odd")
    if k == 0:
        raise ShapeError("empty contour")
    cdef int ext = (taps - 1) * dilation
    f32 = np.ascontiguousarray(f, dtype=np.float32)
    cdef float[:, ::1] fe = _ring_extend(f32, ext)
    w64_arr = np.ascontiguousarray(w, dtype=np.float32).astype(np.float64)
    cdef double[:, :, ::1] w64 = w64_arr
    cdef float[::1] bv = np.ascontiguousarray(b, dtype=np.float32)
    out64_arr = np.empty((cout, k), dtype=np.float64)
    cdef double[:, ::1] out64 = out64_arr
    cdef int co, ci, r, p, d = dilation
    cdef double* orow
    with nogil:
        for co in prange(cout, schedule="static"):
            orow = &out64[co, 0]
            for p in range(k):
                orow[p] = <double> bv[co]
            for ci in range(c):
                if taps == 9:
                    ps_circ9_f64(orow, &fe[ci, 0], &w64[co, ci, 0], k, d)
                else:
                    for r in range(taps):
                        ps_tap_f64(orow, &fe[ci, r * d], w64[co, ci, r], k, 1)
    return out64_arr.astype(np.float32)


def circ_conv1d_bwd_input(g, w, int dilation):
    cdef int cout = w.shape[0], c = w.shape[1], taps = w.shape[2]
    cdef int k = g.shape[1]
    cdef int ext = (taps - 1) * dilation
    g32 = np.ascontiguousarray(g, dtype=np.float32)
    cdef float[:, ::1] ge = _ring_extend(g32, ext)
    cdef float[:, :, ::1] wv = np.ascontiguousarray(w, dtype=np.float32)
    df_arr = np.zeros((c, k), dtype=np.float64)
    cdef double[:, ::1] df = df_arr
    cdef int co, ci, r, d = dilation
    with nogil:
        for ci in prange(c, schedule="static"):
            for co in range(cout):
                for r in range(taps):
                    # input q feeds output p = q - (r-R)*d, i.e. extended col q + (taps-1-r)*d
                    ps_tap_f64(&df[ci, 0], &ge[co, (taps - 1 - r) * d],
                               <double> wv[co, ci, r], k, 1)
    return df_arr.astype(np.float32)


def circ_conv1d_bwd_weight(g, f, w_shape, int dilation):
    cdef int cout = w_shape[0], c = w_shape[1], taps = w_shape[2]
    cdef int k = f.shape[1]
    cdef int ext = (taps - 1) * dilation
    f32 = np.ascontiguousarray(f, dtype=np.float32)
    cdef float[:, ::1] fe = _ring_extend(f32, ext)
    cdef float[:, ::1] gv = np.ascontiguousarray(g, dtype=np.float32)
    dw_arr = np.empty((cout, c, taps), dtype=np.float64)
    cdef double[:, :, ::1] dw = dw_arr
    cdef int co, ci, r, d = dilation
    with nogil:
        for co in prange(cout, schedule="static"):
            for ci in range(c):
                for r in range(taps):
                    dw[co, ci, r] = ps_dot8_f64(&gv[co, 0], &fe[ci, r * d], k, 1)
    return dw_arr.astype(np.float32)


def pixcorr_fwd(t, s):
    cdef int c = t.shape[0], ht = t.shape[1], wt = t.shape[2]
    cdef int hs = s.shape[1], ws = s.shape[2]
    if s.shape[0] != c:
        raise ShapeError(f"pixcorr channels: target {c} vs search {s.shape[0]}")
    cdef int n = ht * wt, m = hs * ws
    cdef float[:, ::1] tv = np.ascontiguousarray(t, dtype=np.float32).reshape(c, n)
    cdef float[:, ::1] sv = np.ascontiguousarray(s, dtype=np.float32).reshape(c, m)
    out64_arr = np.empty((n, m), dtype=np.float64)
    cdef double[:, ::1] out64 = out64_arr
    cdef int i, ci, e
    cdef double* orow
    with nogil:
        for i in prange(n, schedule="static"):
            orow = &out64[i, 0]
            for e in range(m):
                orow[e] = 0.0
            for ci in range(c):
                ps_tap_f64(orow, &sv[ci, 0], <double> tv[ci, i], m, 1)
    return out64_arr.astype(np.float32).reshape(n, hs, ws)


def pixcorr_bwd(g, t, s):
    cdef int c = t.shape[0], ht = t.shape[1], wt = t.shape[2]
    cdef int hs = s.shape[1], ws = s.shape[2]
    cdef int n = ht * wt, m = hs * ws
    cdef float[:, ::1] gv = np.ascontiguousarray(g, dtype=np.float32).reshape(n, m)
    cdef float[:, ::1] tv = np.ascontiguousarray(t, dtype=np.float32).reshape(c, n)
    cdef float[:, ::1] sv = np.ascontiguousarray(s, dtype=np.float32).reshape(c, m)
    dt_arr = np.empty((c, n), dtype=np.float64)
    ds_arr = np.zeros((c, m), dtype=np.float64)
    cdef double[:, ::1] dt = dt_arr
    cdef double[:, ::1] ds = ds_arr
    cdef int ci, i
    with nogil:
        for ci in prange(c, schedule="static"):
            for i in range(n):
                dt[ci, i] = ps_dot8_f64(&gv[i, 0], &sv[ci, 0], m, 1)
                ps_tap_f64(&ds[ci, 0], &gv[i, 0], <double> tv[ci, i], m, 1)
    return dt_arr.astype(np.float32).reshape(c, ht, wt), ds_arr.astype(np.float32).reshape(c, hs, ws)
