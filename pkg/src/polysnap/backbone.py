"""Crop extraction and the two-branch encoder.

Both branches consume the same anisotropically resized search crop: the
box is inflated by the search scale ``s`` about its center, resampled to
128x128, and the target branch is realized at feature level by center-
cropping the deepest stage to the central ``1/s^2`` area. Each retained
target pixel acts as a 1x1 kernel correlated against the full search
feature map, and the correlation volume is fused back up the pyramid,
doubling resolution per step, to a 64-channel map at half crop size.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ContractError, ShapeError
from .geometry import BBox
from .nn import Conv2d
from .tensor import Tensor, crop2d, pixcorr, relu, upsample2x

CROP_SIZE = 128
STAGE_CHANNELS = (16, 32, 64, 128)
FUSED_CHANNELS = 64


@dataclass(frozen=True)
class CropTransform:
    """Per-axis affine between crop and image coordinates.

    Both sides use the continuous convention of geometry.py: pixel
    (i, j) has its center at (j + 0.5, i + 0.5).
    """

    ox: float
    oy: float
    sx: float
    sy: float

    def to_image(self, pts: np.ndarray) -> np.ndarray:
        pts = np.asarray(pts, dtype=np.float64)
        return np.stack(
            [self.ox + pts[..., 0] * self.sx, self.oy + pts[..., 1] * self.sy], axis=-1
        )

    def to_crop(self, pts: np.ndarray) -> np.ndarray:
        pts = np.asarray(pts, dtype=np.float64)
        return np.stack(
            [(pts[..., 0] - self.ox) / self.sx, (pts[..., 1] - self.oy) / self.sy], axis=-1
        )


@dataclass(frozen=True)
class CropPair:
    """Shared search/target crop plus the map back to image coordinates."""

    search: np.ndarray  # [3, 128, 128] float32, raw [0, 1] intensities
    scale: float
    transform: CropTransform
    box: BBox


def _sample_image_grid(image: np.ndarray, px: np.ndarray, py: np.ndarray):
    """Clamped bilinear sample of [3,H,W] at the outer grid py x px.

    Returns the [3, len(py), len(px)] samples and a validity mask marking
    grid points whose continuous position falls inside the image rectangle.
    """
    h, w = image.shape[1:]
    valid = ((py >= 0.0) & (py <= h))[:, None] & ((px >= 0.0) & (px <= w))[None, :]
    gx = np.clip(px - 0.5, 0.0, w - 1.0)
    gy = np.clip(py - 0.5, 0.0, h - 1.0)
    x0 = np.floor(gx).astype(np.intp)
    y0 = np.floor(gy).astype(np.intp)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    tx = (gx - x0).astype(np.float32)[None, None, :]
    ty = (gy - y0).astype(np.float32)[None, :, None]
    row0 = image[:, y0[:, None], x0[None, :]] * (1 - tx) + image[:, y0[:, None], x1[None, :]] * tx
    row1 = image[:, y1[:, None], x0[None, :]] * (1 - tx) + image[:, y1[:, None], x1[None, :]] * tx
    return row0 * (1 - ty) + row1 * ty, valid


def extract_crops(image: np.ndarray, box: BBox, s: float, size: int = CROP_SIZE) -> CropPair:
    """Cut the concentric s-scaled region around ``box`` and resize to ``size``².

    The region is sampled bilinearly at crop pixel centers; centers
    falling outside the image are filled with the per-channel mean of
    the in-image part of the crop.
    """
    image = np.asarray(image, dtype=np.float32)
    if image.ndim != 3 or image.shape[0] != 3:
        raise ShapeError(f"image must be [3,H,W], got {image.shape}")
    if not 1.0 < s < 2.0:
        raise ContractError(f"search scale must lie in (1, 2), got {s}")
    h, w = image.shape[1:]
    if box.x1 <= 0 or box.y1 <= 0 or box.x0 >= w or box.y0 >= h:
        raise ContractError(f"box {box} lies outside the {w}x{h} image")
    cx = 0.5 * (box.x0 + box.x1)
    cy = 0.5 * (box.y0 + box.y1)
    rw = s * box.width
    rh = s * box.height
    tr = CropTransform(ox=cx - 0.5 * rw, oy=cy - 0.5 * rh, sx=rw / size, sy=rh / size)
    centers = np.arange(size, dtype=np.float64) + 0.5
    crop, valid = _sample_image_grid(image, tr.ox + centers * tr.sx, tr.oy + centers * tr.sy)
    if not valid.all():
        if not valid.any():
            raise ContractError("crop region has no pixel centers inside the image")
        fill = crop[:, valid].mean(axis=1)
        crop[:, ~valid] = fill[:, None]
    return CropPair(search=np.ascontiguousarray(crop), scale=s, transform=tr, box=box)


class Backbone:
    """Four stages of stride-2 then stride-1 3x3 convs, ReLU after each.

    Halves resolution per stage: a 128² crop yields maps of 64, 32, 16
    and 8 pixels with channels (16, 32, 64, 128). Weight sharing between
    the branches is structural (there is only one copy of the weights).
    """

    def __init__(self, rng: np.random.Generator, c_in: int = 3):
        self.stages = []
        for c_out in STAGE_CHANNELS:
            down = Conv2d(rng, c_in, c_out, k=3, stride=2, padding=1)
            keep = Conv2d(rng, c_out, c_out, k=3, stride=1, padding=1)
            self.stages.append((down, keep))
            c_in = c_out

    def __call__(self, x: Tensor) -> list[Tensor]:
        if x.shape != (3, CROP_SIZE, CROP_SIZE):
            raise ShapeError(f"backbone expects [3,{CROP_SIZE},{CROP_SIZE}], got {x.shape}")
        feats = []
        for down, keep in self.stages:
            x = relu(down(x))
            x = relu(keep(x))
            feats.append(x)
        return feats

    def named_params(self, prefix: str):
        out = []
        for idx, (down, keep) in enumerate(self.stages, 1):
            out += down.named_params(f"{prefix}.s{idx}.down")
            out += keep.named_params(f"{prefix}.s{idx}.keep")
        return out


def target_side(side: int, s: float) -> int:
    """Side length of the central 1/s² window; ties round up."""
    return max(1, int(math.floor(side / s + 0.5)))


def center_crop_target(stage: Tensor, s: float) -> Tensor:
    """Center window of a [C,H,W] stage covering ~1/s² of its area."""
    _, h, w = stage.shape
    if h < 2:
        raise ContractError(f"stage too small to crop: {stage.shape}")
    ht = target_side(h, s)
    wt = target_side(w, s)
    return crop2d(stage, (h - ht) // 2, (w - wt) // 2, ht, wt)


def pixelwise_correlation(target: Tensor, search: Tensor) -> Tensor:
    """Correlate every target pixel (a 1x1 kernel) against the search map.

    Output plane i (row-major over the target grid) holds the per-pixel
    dot products of target pixel i with each search position.
    """
    if target.shape[0] != search.shape[0]:
        raise ShapeError(f"channel mismatch: target {target.shape} vs search {search.shape}")
    return pixcorr(target, search)


class FusionNeck:
    """Fuse the correlation volume with search features, coarse to fine.

    Starts from a 1x1 projection of the correlation volume at deepest-
    stage resolution, then three rounds of upsample, add a 1x1-projected
    search stage (in inverse stage order), 3x3 conv, ReLU. Ends at half
    the crop resolution with FUSED_CHANNELS channels.
    """

    def __init__(self, rng: np.random.Generator, corr_channels: int):
        width = FUSED_CHANNELS
        self.m0 = Conv2d(rng, corr_channels, width, k=1)
        self.projs = [Conv2d(rng, c, width, k=1) for c in STAGE_CHANNELS[-2::-1]]
        self.fuses = [Conv2d(rng, width, width, k=3, padding=1) for _ in STAGE_CHANNELS[:-1]]

    def __call__(self, corr: Tensor, stages: Sequence[Tensor]) -> Tensor:
        if len(stages) != len(STAGE_CHANNELS):
            raise ShapeError(f"expected {len(STAGE_CHANNELS)} stages, got {len(stages)}")
        if corr.shape[1:] != stages[-1].shape[1:]:
            raise ShapeError(
                f"correlation {corr.shape} not at deepest stage resolution {stages[-1].shape}"
            )
        m = self.m0(corr)
        for proj, fuse, stage in zip(self.projs, self.fuses, stages[-2::-1]):
            up = upsample2x(m)
            if stage.shape[1:] != up.shape[1:]:
                raise ShapeError(f"stage {stage.shape} does not match upsampled {up.shape}")
            m = relu(fuse(up + proj(stage)))
        return m

    def named_params(self, prefix: str):
        out = self.m0.named_params(f"{prefix}.m0")
        for idx, proj in enumerate(self.projs, 1):
            out += proj.named_params(f"{prefix}.proj{idx}")
        for idx, fuse in enumerate(self.fuses, 1):
            out += fuse.named_params(f"{prefix}.fuse{idx}")
        return out
