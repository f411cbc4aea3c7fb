"""Tiny layer containers over the autodiff ops.

Layers own their weight/bias Tensors and expose ``named_params`` so the
trainer and checkpoint code can address every parameter by a stable
dotted name. Initialization is He-uniform (bound sqrt(6/fan_in)) with
zero biases, drawn from a caller-supplied Generator so a seeded model
build is reproducible array-for-array.
"""

from __future__ import annotations

import numpy as np

from .tensor import Tensor, circ_conv1d, conv2d


def he_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = float(np.sqrt(6.0 / fan_in))
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


class Conv2d:
    """k x k convolution over a [C,H,W] map."""

    def __init__(self, rng, c_in: int, c_out: int, k: int = 3, stride: int = 1, padding: int = 0):
        self.w = Tensor(he_uniform(rng, (c_out, c_in, k, k), c_in * k * k), requires_grad=True)
        self.b = Tensor(np.zeros(c_out, dtype=np.float32), requires_grad=True)
        self.stride = stride
        self.padding = padding

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.w, self.b, stride=self.stride, padding=self.padding)

    def named_params(self, prefix: str):
        return [(prefix + ".w", self.w), (prefix + ".b", self.b)]


class CircConv1d:
    """Circular convolution over a [C,K] vertex ring; taps=1 is a pointwise conv."""

    def __init__(self, rng, c_in: int, c_out: int, taps: int = 1, dilation: int = 1):
        self.w = Tensor(he_uniform(rng, (c_out, c_in, taps), c_in * taps), requires_grad=True)
        self.b = Tensor(np.zeros(c_out, dtype=np.float32), requires_grad=True)
        self.dilation = dilation

    def __call__(self, f: Tensor) -> Tensor:
        return circ_conv1d(f, self.w, self.b, dilation=self.dilation)

    def named_params(self, prefix: str):
        return [(prefix + ".w", self.w), (prefix + ".b", self.b)]
