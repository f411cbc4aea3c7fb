"""Reverse-mode autodiff over float32 numpy buffers.

The tape is implicit: every Tensor gets a monotonically increasing node
id at creation, and since an op's inputs always exist before its output,
sorting reachable nodes by id yields a topological order. ``backward``
walks that order in reverse, calling each recorded ``_backward`` closure
exactly once. Gradients accumulate, so a second backward without zeroing
adds on top.

Storage is float32; reductions inside kernels accumulate in float64 (see
kernels_numpy for the exact per-element order). There is no broadcasting
beyond tensor-with-python-scalar; the few places the network needs a
ragged pairing (per-column gating, coordinate rows) get dedicated ops
with hand-written backward passes.

Feature-sampling positions are treated as constants: ``bilinear_sample``
differentiates through the sampled map only, never through the sampling
coordinates.
"""

from __future__ import annotations

import functools
import itertools
import os
from typing import Callable, Optional, Sequence

import numpy as np

from ..errors import ContractError, ShapeError
from . import kernels

_DEBUG_FINITE = os.environ.get("POLYSNAP_DEBUG") == "1"
_ids = itertools.count()
_grad_enabled = True


class no_grad:
    """Context that skips backward-closure recording (inference paths)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False

__all__ = [
    "Tensor",
    "conv2d",
    "circ_conv1d",
    "crop2d",
    "upsample2x",
    "pixcorr",
    "bilinear_sample",
    "concat_rows",
    "row_scale",
    "relu",
    "tanh",
    "sigmoid",
    "smooth_l1",
    "sum_all",
    "mean_all",
    "no_grad",
]


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_id")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float32, order="C")
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._backward: Optional[Callable[[], None]] = None
        self._id = next(_ids)

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        if self.data.shape != ():
            raise ContractError(f"backward needs a scalar, got shape {self.data.shape}")
        nodes = []
        seen = set()
        stack = [self]
        while stack:
            t = stack.pop()
            if id(t) in seen:
                continue
            seen.add(id(t))
            nodes.append(t)
            stack.extend(t._parents)
        # interior grads are per-call scratch; only leaves accumulate
        for t in nodes:
            if t._backward is not None:
                t.grad = None
        if self._backward is None and self.grad is not None:
            self.grad += np.float32(1.0)
        else:
            self.grad = np.ones((), dtype=np.float32)
        nodes.sort(key=lambda t: t._id, reverse=True)
        for t in nodes:
            if t._backward is not None and t.grad is not None:
                t._backward()

    # -- operator sugar (python scalars or same-shape tensors only) --

    def __add__(self, other):
        return _add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return _mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return _mul(self, -1.0)

    def __sub__(self, other):
        return _add(self, -other if isinstance(other, Tensor) else -float(other))

    def __rsub__(self, other):
        return _add(-self, float(other))

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return _div(self, other)
        return _mul(self, 1.0 / float(other))

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_builder) -> Tensor:
    """Wrap an op result; records the backward closure only when needed."""
    out = Tensor(data)
    if _DEBUG_FINITE and not np.all(np.isfinite(out.data)):
        raise ContractError("non-finite values in op output")
    grads_needed = _grad_enabled and any(p.requires_grad for p in parents)
    if grads_needed:
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_builder(out)
    return out


def _accum(t: Tensor, g: np.ndarray):
    if not t.requires_grad:
        return
    g = g.astype(np.float32, copy=False).reshape(t.data.shape)
    if t.grad is None:
        t.grad = g.copy()
    else:
        t.grad += g


def _lift(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float32))


def _check_same_shape(a: Tensor, b: Tensor, op: str):
    if a.data.shape != b.data.shape:
        raise ShapeError(f"{op}: shapes {a.data.shape} and {b.data.shape} differ")


def _add(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        s = np.float32(b)

        def build(out):
            def back():
                _accum(a, out.grad)

            return back

        return _make(a.data + s, [a], build)
    _check_same_shape(a, b, "add")

    def build(out):
        def back():
            _accum(a, out.grad)
            _accum(b, out.grad)

        return back

    return _make(a.data + b.data, [a, b], build)


def _mul(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        s = np.float32(b)

        def build(out):
            def back():
                _accum(a, out.grad * s)

            return back

        return _make(a.data * s, [a], build)
    _check_same_shape(a, b, "mul")

    def build(out):
        def back():
            _accum(a, out.grad * b.data)
            _accum(b, out.grad * a.data)

        return back

    return _make(a.data * b.data, [a, b], build)


def _div(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "div")

    def build(out):
        def back():
            _accum(a, out.grad / b.data)
            _accum(b, -out.grad * a.data / (b.data * b.data))

        return back

    return _make(a.data / b.data, [a, b], build)


def relu(x: Tensor) -> Tensor:
    def build(out):
        def back():
            _accum(x, out.grad * (x.data > 0))

        return back

    return _make(np.maximum(x.data, 0), [x], build)


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)

    def build(out):
        def back():
            _accum(x, out.grad * (1.0 - out.data * out.data))

        return back

    return _make(y, [x], build)


def sigmoid(x: Tensor) -> Tensor:
    y = 1.0 / (1.0 + np.exp(-x.data.astype(np.float64)))

    def build(out):
        def back():
            _accum(x, out.grad * out.data * (1.0 - out.data))

        return back

    return _make(y, [x], build)


def smooth_l1(x: Tensor) -> Tensor:
    """Elementwise smooth L1 with transition at 1: 0.5x^2 inside, |x|-0.5 outside."""
    ax = np.abs(x.data)
    y = np.where(ax < 1.0, 0.5 * x.data * x.data, ax - 0.5)

    def build(out):
        def back():
            _accum(x, out.grad * np.clip(x.data, -1.0, 1.0))

        return back

    return _make(y, [x], build)


def sum_all(x: Tensor) -> Tensor:
    def build(out):
        def back():
            _accum(x, np.full(x.data.shape, out.grad, dtype=np.float32))

        return back

    return _make(np.float32(np.sum(x.data, dtype=np.float64)), [x], build)


def mean_all(x: Tensor) -> Tensor:
    n = x.data.size

    def build(out):
        def back():
            _accum(x, np.full(x.data.shape, out.grad / n, dtype=np.float32))

        return back

    return _make(np.float32(np.sum(x.data, dtype=np.float64) / n), [x], build)


def conv2d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    y = kernels.conv2d_fwd(x.data, w.data, b.data, stride, padding)

    def build(out):
        def back():
            g = out.grad
            _accum(x, kernels.conv2d_bwd_input(g, w.data, x.data.shape, stride, padding))
            _accum(w, kernels.conv2d_bwd_weight(g, x.data, w.data.shape, stride, padding))
            _accum(b, kernels.conv2d_bwd_bias(g))

        return back

    return _make(y, [x, w, b], build)


def circ_conv1d(f: Tensor, w: Tensor, b: Tensor, dilation: int = 1) -> Tensor:
    y = kernels.circ_conv1d_fwd(f.data, w.data, b.data, dilation)

    def build(out):
        def back():
            g = out.grad
            _accum(f, kernels.circ_conv1d_bwd_input(g, w.data, dilation))
            _accum(w, kernels.circ_conv1d_bwd_weight(g, f.data, w.data.shape, dilation))
            _accum(b, kernels.circ_conv1d_bwd_bias(g))

        return back

    return _make(y, [f, w, b], build)


def _upsample_weights(n: int):
    src = np.clip((np.arange(2 * n) + 0.5) / 2.0 - 0.5, 0.0, n - 1.0)
    i0 = np.floor(src).astype(np.intp)
    i1 = np.minimum(i0 + 1, n - 1)
    t = (src - i0).astype(np.float32)
    return i0, i1, t


@functools.lru_cache(maxsize=None)
def _upsample_matrix(n: int) -> np.ndarray:
    """[2n, n] interpolation matrix; row o holds the lerp weights of output o."""
    i0, i1, t = _upsample_weights(n)
    u = np.zeros((2 * n, n), dtype=np.float32)
    rows = np.arange(2 * n)
    # add.at, not assignment: clamped edge rows have i0 == i1
    np.add.at(u, (rows, i0), 1.0 - t)
    np.add.at(u, (rows, i1), t)
    return u


def upsample2x(x: Tensor) -> Tensor:
    """Bilinear 2x upsampling, align_corners=false (edge-replicating)."""
    c, h, w = x.data.shape
    i0, i1, ti = _upsample_weights(h)
    j0, j1, tj = _upsample_weights(w)
    rows = x.data[:, i0, :] * (1 - ti)[None, :, None] + x.data[:, i1, :] * ti[None, :, None]
    y = rows[:, :, j0] * (1 - tj)[None, None, :] + rows[:, :, j1] * tj[None, None, :]

    def build(out):
        def back():
            # transposed interpolation as two matmuls; a scatter here would
            # dominate the whole backward pass
            g = out.grad
            uh = _upsample_matrix(h)
            uw = _upsample_matrix(w)
            tmp = np.tensordot(g, uw, axes=([2], [0]))
            gx = np.tensordot(tmp, uh, axes=([1], [0]))
            _accum(x, np.ascontiguousarray(gx.transpose(0, 2, 1)))

        return back

    return _make(y, [x], build)


def crop2d(x: Tensor, top: int, left: int, height: int, width: int) -> Tensor:
    """Center-style window slice of [C,H,W]; backward scatters into the window."""
    c, h, w = x.data.shape
    if top < 0 or left < 0 or top + height > h or left + width > w:
        raise ShapeError(
            f"crop2d window [{top}:{top + height}, {left}:{left + width}] "
            f"outside map of shape {x.data.shape}"
        )
    y = x.data[:, top : top + height, left : left + width].copy()

    def build(out):
        def back():
            gx = np.zeros_like(x.data)
            gx[:, top : top + height, left : left + width] = out.grad
            _accum(x, gx)

        return back

    return _make(y, [x], build)


def pixcorr(t: Tensor, s: Tensor) -> Tensor:
    y = kernels.pixcorr_fwd(t.data, s.data)

    def build(out):
        def back():
            dt, ds = kernels.pixcorr_bwd(out.grad, t.data, s.data)
            _accum(t, dt)
            _accum(s, ds)

        return back

    return _make(y, [t, s], build)


def bilinear_sample(m: Tensor, coords: np.ndarray) -> Tensor:
    """Sample [C,H,W] at K (x, y) grid positions -> [C,K]; border-clamped.

    Coordinates are constants: no gradient flows into them.
    """
    c, h, w = m.data.shape
    coords = np.asarray(coords, dtype=np.float64)
    if coords.ndim != 2 or coords.shape[1] != 2:
        raise ShapeError(f"coords must be (K, 2), got {coords.shape}")
    xs = np.clip(coords[:, 0], 0.0, w - 1.0)
    ys = np.clip(coords[:, 1], 0.0, h - 1.0)
    x0 = np.floor(xs).astype(np.intp)
    y0 = np.floor(ys).astype(np.intp)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    tx = (xs - x0).astype(np.float32)
    ty = (ys - y0).astype(np.float32)
    w00 = (1 - ty) * (1 - tx)
    w01 = (1 - ty) * tx
    w10 = ty * (1 - tx)
    w11 = ty * tx
    y = (
        m.data[:, y0, x0] * w00
        + m.data[:, y0, x1] * w01
        + m.data[:, y1, x0] * w10
        + m.data[:, y1, x1] * w11
    )

    def build(out):
        def back():
            g = out.grad
            gm = np.zeros_like(m.data)
            np.add.at(gm, (slice(None), y0, x0), g * w00)
            np.add.at(gm, (slice(None), y0, x1), g * w01)
            np.add.at(gm, (slice(None), y1, x0), g * w10)
            np.add.at(gm, (slice(None), y1, x1), g * w11)
            _accum(m, gm)

        return back

    return _make(y, [m], build)


def concat_rows(a: Tensor, b: Tensor) -> Tensor:
    """Stack [C1,K] over [C2,K] -> [C1+C2,K]."""
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[1]:
        raise ShapeError(f"concat_rows: {a.data.shape} vs {b.data.shape}")
    c1 = a.data.shape[0]

    def build(out):
        def back():
            _accum(a, out.grad[:c1])
            _accum(b, out.grad[c1:])

        return back

    return _make(np.concatenate([a.data, b.data], axis=0), [a, b], build)


def row_scale(o: Tensor, beta: Tensor) -> Tensor:
    """Scale each column of [C,K] by the matching entry of beta [1,K]."""
    if beta.data.shape != (1, o.data.shape[1]):
        raise ShapeError(f"row_scale: beta {beta.data.shape} vs values {o.data.shape}")

    def build(out):
        def back():
            _accum(o, out.grad * beta.data)
            _accum(beta, np.sum(out.grad * o.data, axis=0, keepdims=True))

        return back

    return _make(o.data * beta.data, [o, beta], build)
