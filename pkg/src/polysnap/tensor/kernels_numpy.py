"""Reference numpy kernels for the compute-heavy ops.

Accumulation contract (shared with the compiled backend, and with the
direct-summation oracles in the tests):

* Every output element accumulates in float64 and is cast to the input
  dtype once, at the end.
* conv2d: acc starts at bias[co]; taps are added one at a time in
  (ci, kh, kw) order. circ_conv1d: (ci, r) order. pixelwise_correlation:
  ascending channel order.
* float32 inputs promote exactly into float64 products, so any backend
  that adds the same taps in the same sequence produces bit-identical
  float32 results (fused multiply-add included, since the products are
  exact).

Forward kernels here follow that element order literally (one vectorized
`+=` per tap). Backward kernels only promise determinism, not a specific
order; they reduce through BLAS tensordot in the input dtype, so float32
training arrays take the sgemm path while float64 reruns (as used by the
finite-difference checks) keep full precision end to end.
"""

from __future__ import annotations

import numpy as np

from ..errors import ShapeError

__all__ = [
    "conv2d_fwd",
    "conv2d_bwd_input",
    "conv2d_bwd_weight",
    "conv2d_bwd_bias",
    "circ_conv1d_fwd",
    "circ_conv1d_bwd_input",
    "circ_conv1d_bwd_weight",
    "circ_conv1d_bwd_bias",
    "pixcorr_fwd",
    "pixcorr_bwd",
]


def _pad2d(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (p, p), (p, p)))


def conv2d_fwd(x: np.ndarray, w: np.ndarray, b: np.ndarray, stride: int, padding: int) -> np.ndarray:
    """Cross-correlation of [Cin,H,W] with [Cout,Cin,kh,kw] -> [Cout,H',W']."""
    cin, h, wd = x.shape
    cout, cin2, kh, kw = w.shape
    if cin != cin2:
        raise ShapeError(f"conv2d channels: input {cin} vs kernel {cin2}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError("conv2d kernel dims must be odd")
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wd + 2 * padding - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError("conv2d output would be empty")
    xp = _pad2d(x, padding).astype(np.float64)
    w64 = w.astype(np.float64)
    out = np.empty((cout, ho, wo), dtype=np.float64)
    for co in range(cout):
        acc = np.full((ho, wo), np.float64(b[co]))
        for ci in range(cin):
            for ki in range(kh):
                for kj in range(kw):
                    sl = xp[ci, ki : ki + stride * ho : stride, kj : kj + stride * wo : stride]
                    acc += sl * w64[co, ci, ki, kj]
        out[co] = acc
    return out.astype(x.dtype)


def conv2d_bwd_input(g: np.ndarray, w: np.ndarray, x_shape, stride: int, padding: int) -> np.ndarray:
    cin, h, wd = x_shape
    cout, _, kh, kw = w.shape
    _, ho, wo = g.shape
    w = w.astype(g.dtype, copy=False)
    dxp = np.zeros((cin, h + 2 * padding, wd + 2 * padding), dtype=g.dtype)
    for ki in range(kh):
        for kj in range(kw):
            # dxp[ci, ki+si, kj+sj] += sum_co g[co,i,j] * w[co,ci,ki,kj]
            t = np.tensordot(w[:, :, ki, kj], g, axes=(0, 0))  # [cin,ho,wo]
            dxp[:, ki : ki + stride * ho : stride, kj : kj + stride * wo : stride] += t
    if padding:
        dxp = dxp[:, padding:-padding, padding:-padding]
    return dxp


def conv2d_bwd_weight(g: np.ndarray, x: np.ndarray, w_shape, stride: int, padding: int) -> np.ndarray:
    cout, cin, kh, kw = w_shape
    _, ho, wo = g.shape
    xp = _pad2d(x, padding).astype(g.dtype, copy=False)
    dw = np.empty(w_shape, dtype=g.dtype)
    for ki in range(kh):
        for kj in range(kw):
            sl = xp[:, ki : ki + stride * ho : stride, kj : kj + stride * wo : stride]
            dw[:, :, ki, kj] = np.tensordot(g, np.ascontiguousarray(sl), axes=([1, 2], [1, 2]))
    return dw


def conv2d_bwd_bias(g: np.ndarray) -> np.ndarray:
    return np.sum(g, axis=(1, 2), dtype=np.float64).astype(g.dtype)


def _wrap_index(k: int, r_off: int) -> np.ndarray:
    return np.mod(np.arange(k) + r_off, k)


def circ_conv1d_fwd(f: np.ndarray, w: np.ndarray, b: np.ndarray, dilation: int) -> np.ndarray:
    """Circular 1-D conv of [C,K] with [Cout,C,2R+1], indices wrap mod K."""
    c, k = f.shape
    cout, c2, taps = w.shape
    if c != c2:
        raise ShapeError(f"circ_conv1d channels: input {c} vs kernel {c2}")
    if taps % 2 == 0:
        raise ShapeError("circ_conv1d kernel width must be odd")
    if k == 0:
        raise ShapeError("empty contour")
    # taps may wrap the ring more than once; callers that want a
    # receptive-span limit enforce it at their level
    radius = taps // 2
    f64 = f.astype(np.float64)
    w64 = w.astype(np.float64)
    idx = [_wrap_index(k, (r - radius) * dilation) for r in range(taps)]
    out = np.empty((cout, k), dtype=np.float64)
    out[:] = np.asarray(b, dtype=np.float64)[:, None]
    for ci in range(c):
        for r in range(taps):
            out += w64[:, ci, r][:, None] * f64[ci, idx[r]][None, :]
    return out.astype(f.dtype)


def circ_conv1d_bwd_input(g: np.ndarray, w: np.ndarray, dilation: int) -> np.ndarray:
    cout, c, taps = w.shape
    _, k = g.shape
    radius = taps // 2
    w = w.astype(g.dtype, copy=False)
    df = np.zeros((c, k), dtype=g.dtype)
    for r in range(taps):
        # output p reads input (p + (r-R)*d) mod K, so input q feeds p = q - (r-R)*d
        gshift = g[:, _wrap_index(k, -(r - radius) * dilation)]
        df += np.tensordot(w[:, :, r], gshift, axes=(0, 0))
    return df


def circ_conv1d_bwd_weight(g: np.ndarray, f: np.ndarray, w_shape, dilation: int) -> np.ndarray:
    cout, c, taps = w_shape
    _, k = f.shape
    radius = taps // 2
    f = f.astype(g.dtype, copy=False)
    dw = np.empty(w_shape, dtype=g.dtype)
    for r in range(taps):
        fshift = f[:, _wrap_index(k, (r - radius) * dilation)]
        dw[:, :, r] = g @ fshift.T
    return dw


def circ_conv1d_bwd_bias(g: np.ndarray) -> np.ndarray:
    return np.sum(g, axis=1, dtype=np.float64).astype(g.dtype)


def pixcorr_fwd(t: np.ndarray, s: np.ndarray) -> np.ndarray:
    """Every target pixel acts as a 1x1 kernel over the search map.

    [c,Ht,Wt] x [c,Hs,Ws] -> [Ht*Wt,Hs,Ws], kernels in row-major target order.
    """
    c, ht, wt = t.shape
    c2, hs, ws = s.shape
    if c != c2:
        raise ShapeError(f"pixcorr channels: target {c} vs search {c2}")
    t64 = t.reshape(c, ht * wt).astype(np.float64)
    s64 = s.astype(np.float64)
    out = np.zeros((ht * wt, hs, ws), dtype=np.float64)
    for ci in range(c):
        out += t64[ci][:, None, None] * s64[ci][None, :, :]
    return out.astype(t.dtype)


def pixcorr_bwd(g: np.ndarray, t: np.ndarray, s: np.ndarray):
    c, ht, wt = t.shape
    s = s.astype(g.dtype, copy=False)
    tmat = t.reshape(c, ht * wt).astype(g.dtype, copy=False)
    dt = np.tensordot(g, s, axes=([1, 2], [1, 2])).T.reshape(c, ht, wt)
    ds = np.tensordot(tmat, g, axes=(1, 0))
    return dt, ds
