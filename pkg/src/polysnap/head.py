"""Contour deformation head.

Per-vertex features are bilinear samples of the fused correlation map
concatenated with relative vertex coordinates (translation and scale
invariant). A cascade of dilated circular convolutions aggregates ring
neighborhoods at several ranges; the block outputs are summed (the
first block changes channel width, so skips accumulate into a running
sum rather than wrapping each block), and four pointwise convolutions
squeeze the sum down to a tanh-bounded offset per vertex. A separate
pointwise layer over the same per-vertex features drives the attentive
merge that blends a fresh offset estimate with the previous one.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, ShapeError
from .nn import CircConv1d
from .tensor import Tensor, bilinear_sample, concat_rows, relu, row_scale, tanh

# the fused map sits at half crop resolution, so crop coordinate u lands
# at feature pixel-center coordinate u/2 - 0.5
FEATURE_STRIDE = 2

VERTEX_CHANNELS = 66  # 64 fused channels + 2 relative coordinates
HEAD_WIDTH = 128
SQUEEZE_WIDTHS = (64, 64, 32, 2)


@dataclass(frozen=True)
class HeadConfig:
    k: int = 128
    dilations: tuple[int, ...] = (1, 1, 2, 2, 4, 4)
    r: int = 4
    iterations: int = 2

    def __post_init__(self):
        if self.k < 4 or self.k % 4 != 0:
            raise ContractError(f"K must be positive and divisible by 4, got {self.k}")
        if not self.dilations or any(d < 1 for d in self.dilations):
            raise ContractError(f"dilations must all be >= 1, got {self.dilations}")
        if self.iterations < 1:
            raise ContractError(f"iterations must be >= 1, got {self.iterations}")

    @property
    def span(self) -> int:
        """Widest receptive span of a single block: 2*R*max(dilation) + 1."""
        return 2 * self.r * max(self.dilations) + 1


def sample_vertex_features(fused: Tensor, verts: np.ndarray, obj_w: float, obj_h: float) -> Tensor:
    """Per-vertex feature rows: fused-map samples plus relative coords.

    ``verts`` is a (K, 2) array in crop coordinates; samples are taken at
    the matching fused-map positions (border-clamped). Coordinates enter
    as (v - min v) / object extent per axis, matching normalize_coords
    but computed on the raw ring so vertex order is preserved.
    """
    verts = np.asarray(verts, dtype=np.float64)
    if verts.ndim != 2 or verts.shape[1] != 2:
        raise ShapeError(f"verts must be (K, 2), got {verts.shape}")
    sampled = bilinear_sample(fused, verts / FEATURE_STRIDE - 0.5)
    rel = (verts - verts.min(axis=0)) / np.array([obj_w, obj_h], dtype=np.float64)
    return concat_rows(sampled, Tensor(np.ascontiguousarray(rel.T)))


class SnakeHead:
    """Dilated circular-conv cascade regressing bounded per-vertex offsets."""

    def __init__(self, rng: np.random.Generator, cfg: HeadConfig):
        taps = 2 * cfg.r + 1
        self.cfg = cfg
        self.blocks = []
        c_in = VERTEX_CHANNELS
        for d in cfg.dilations:
            self.blocks.append(CircConv1d(rng, c_in, HEAD_WIDTH, taps=taps, dilation=d))
            c_in = HEAD_WIDTH
        self.squeeze = []
        c_in = HEAD_WIDTH
        for c_out in SQUEEZE_WIDTHS:
            self.squeeze.append(CircConv1d(rng, c_in, c_out))
            c_in = c_out
        self.beta = CircConv1d(rng, VERTEX_CHANNELS, 1)

    def deform(self, feats: Tensor) -> Tensor:
        """[C_v,K] features -> [2,K] offsets in (-1, 1) (unscaled tanh)."""
        k = feats.shape[1]
        if k < self.cfg.span:
            raise ContractError(
                f"ring of {k} vertices is narrower than the receptive span {self.cfg.span}"
            )
        x = feats
        total = None
        for blk in self.blocks:
            x = relu(blk(x))
            total = x if total is None else total + x
        for layer in self.squeeze[:-1]:
            total = relu(layer(total))
        return tanh(self.squeeze[-1](total))

    def named_params(self, prefix: str):
        out = []
        for idx, blk in enumerate(self.blocks, 1):
            out += blk.named_params(f"{prefix}.block{idx}")
        for idx, layer in enumerate(self.squeeze, 1):
            out += layer.named_params(f"{prefix}.squeeze{idx}")
        out += self.beta.named_params(f"{prefix}.beta")
        return out


def attentive_merge(old: Tensor, new: Tensor, beta: Tensor) -> Tensor:
    """Blend offset fields per vertex: beta*new + (1-beta)*old.

    ``beta`` is [1,K] in (0,1); both offset fields are [2,K] and share
    the anchor they displace from, so the blend stays inside the same
    bound as its inputs.
    """
    if old.shape != new.shape:
        raise ShapeError(f"offset shapes differ: {old.shape} vs {new.shape}")
    return row_scale(new, beta) + row_scale(old, 1.0 - beta)
