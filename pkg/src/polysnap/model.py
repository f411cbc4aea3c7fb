"""End-to-end contour model: encode a crop once, deform a ring over it.

Deformation rounds all displace the same anchor, the box-sampled initial
ring. Round 1 takes the head's offsets as the displacement; each later
round re-samples features at the current vertices, predicts a fresh
displacement estimate and blends it with the previous one through the
attentive merge, so the applied displacement is always a convex
combination of tanh-bounded estimates and never exceeds half the box.

User refinement re-anchors at the edited ring: one attentive round with
zero prior displacement, and vertices the user pinned are left exactly
where they were put.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .backbone import (
    CROP_SIZE,
    Backbone,
    CropPair,
    FusionNeck,
    center_crop_target,
    extract_crops,
    pixelwise_correlation,
    target_side,
)
from .errors import ContractError, ShapeError
from .geometry import BBox, Contour, sample_box_contour
from .head import HeadConfig, SnakeHead, attentive_merge, sample_vertex_features
from .tensor import Tensor, no_grad, sigmoid


@dataclass(frozen=True)
class ModelConfig:
    s: float = 1.5
    k: int = 128
    dilations: tuple[int, ...] = (1, 1, 2, 2, 4, 4)
    r: int = 4
    iterations: int = 2
    norm_mean: float = 0.5
    norm_std: float = 0.5
    init_seed: int = 0

    def __post_init__(self):
        if not 1.0 < self.s < 2.0:
            raise ContractError(f"search scale must lie in (1, 2), got {self.s}")
        object.__setattr__(self, "dilations", tuple(int(d) for d in self.dilations))
        self.head_config()  # validates k / dilations / iterations

    def head_config(self) -> HeadConfig:
        return HeadConfig(
            k=self.k, dilations=self.dilations, r=self.r, iterations=self.iterations
        )


@dataclass
class ForwardRounds:
    """Training-side forward: per-round vertices and the final merge gate.

    ``verts`` holds one [2,K] tensor per deformation round in image
    coordinates; ``beta`` is the [1,K] modulation of the last round
    (None when only one round ran).
    """

    verts: list[Tensor]
    beta: Optional[Tensor]
    v0: np.ndarray
    crop: CropPair


@dataclass
class Prediction:
    contour: Contour
    crop: CropPair
    fused: Tensor


class ContourModel:
    def __init__(self, cfg: ModelConfig = ModelConfig()):
        rng = np.random.default_rng(cfg.init_seed)
        self.cfg = cfg
        self.backbone = Backbone(rng)
        deep = CROP_SIZE // 16
        side = target_side(deep, cfg.s)
        self.neck = FusionNeck(rng, side * side)
        self.head = SnakeHead(rng, cfg.head_config())

    # -- parameters ------------------------------------------------------

    def named_params(self) -> list[tuple[str, Tensor]]:
        return (
            self.backbone.named_params("backbone")
            + self.neck.named_params("neck")
            + self.head.named_params("head")
        )

    def params(self) -> list[Tensor]:
        return [t for _, t in self.named_params()]

    def param_count(self) -> int:
        return sum(t.data.size for t in self.params())

    # -- encoding --------------------------------------------------------

    def encode(self, crop: CropPair) -> Tensor:
        """Crop -> fused correlation map [64, 64, 64]."""
        x = Tensor((crop.search - self.cfg.norm_mean) / self.cfg.norm_std)
        stages = self.backbone(x)
        target = center_crop_target(stages[-1], crop.scale)
        corr = pixelwise_correlation(target, stages[-1])
        expected = self.neck.m0.w.shape[1]
        if corr.shape[0] != expected:
            raise ContractError(
                f"scale {crop.scale} gives {corr.shape[0]} correlation channels; "
                f"model was built for {expected}"
            )
        return self.neck(corr, stages)

    def _obj_dims(self, crop: CropPair) -> tuple[float, float]:
        """Box extent in crop coordinates (both axes equal CROP_SIZE/s)."""
        tr = crop.transform
        return crop.box.width / tr.sx, crop.box.height / tr.sy

    # -- deformation -----------------------------------------------------

    def _deform_rounds(
        self, fused: Tensor, crop: CropPair, v0: np.ndarray, iterations: int
    ) -> tuple[list[Tensor], Optional[Tensor]]:
        """Run deformation rounds anchored at ``v0`` (K,2 crop coords).

        Returns per-round vertex tensors [2,K] in crop coordinates and
        the final round's modulation gate.
        """
        k = len(v0)
        obj_w, obj_h = self._obj_dims(crop)
        half = np.repeat([[obj_w / 2.0], [obj_h / 2.0]], k, axis=1)
        scale = Tensor(half.astype(np.float32))
        anchor = Tensor(np.ascontiguousarray(v0.T, dtype=np.float32))
        rounds: list[Tensor] = []
        disp = None
        beta = None
        cur = v0
        for _ in range(iterations):
            feats = sample_vertex_features(fused, cur, obj_w, obj_h)
            offsets = self.head.deform(feats) * scale
            if disp is None:
                disp = offsets
            else:
                beta = sigmoid(self.head.beta(feats))
                disp = attentive_merge(disp, offsets, beta)
            v = anchor + disp
            rounds.append(v)
            cur = np.ascontiguousarray(v.data.T, dtype=np.float64)
        return rounds, beta

    def _to_image(self, v_crop: Tensor, crop: CropPair) -> Tensor:
        tr = crop.transform
        k = v_crop.shape[1]
        sc = Tensor(np.repeat([[tr.sx], [tr.sy]], k, axis=1).astype(np.float32))
        off = Tensor(np.repeat([[tr.ox], [tr.oy]], k, axis=1).astype(np.float32))
        return v_crop * sc + off

    def forward_training(self, crop: CropPair, iterations: Optional[int] = None) -> ForwardRounds:
        """Full differentiable forward; vertices come back in image coords."""
        iterations = self.cfg.iterations if iterations is None else iterations
        fused = self.encode(crop)
        v0_img = sample_box_contour(crop.box, self.cfg.k).vertices
        v0 = crop.transform.to_crop(v0_img)
        rounds, beta = self._deform_rounds(fused, crop, v0, iterations)
        verts = [self._to_image(v, crop) for v in rounds]
        return ForwardRounds(verts=verts, beta=beta, v0=v0_img, crop=crop)

    # -- inference -------------------------------------------------------

    def predict(self, image: np.ndarray, box: BBox, k: Optional[int] = None) -> Prediction:
        """Box prompt -> contour in image coordinates (plus cached encoding)."""
        k = self.cfg.k if k is None else int(k)
        crop = extract_crops(image, box, self.cfg.s)
        with no_grad():
            fused = self.encode(crop)
            v0_img = sample_box_contour(box, k).vertices
            v0 = crop.transform.to_crop(v0_img)
            rounds, _ = self._deform_rounds(fused, crop, v0, self.cfg.iterations)
        verts = crop.transform.to_image(np.asarray(rounds[-1].data.T, dtype=np.float64))
        return Prediction(contour=Contour(verts), crop=crop, fused=fused)

    def predict_contour(self, image: np.ndarray, box: BBox, k: Optional[int] = None) -> Contour:
        return self.predict(image, box, k).contour

    def refine_with_edits(
        self,
        crop: CropPair,
        prior: Contour,
        pinned: Sequence[bool],
        fused: Optional[Tensor] = None,
    ) -> Contour:
        """One attentive round from the user-edited ring.

        The prior is the new anchor (zero previous displacement), so the
        applied move is beta * offsets; pinned vertices get exactly zero.
        """
        pinned = np.asarray(pinned, dtype=bool)
        if pinned.shape != (len(prior),):
            raise ShapeError(
                f"pinned flags {pinned.shape} do not match {len(prior)} vertices"
            )
        if pinned.all():
            return Contour(prior.vertices.copy())
        with no_grad():
            if fused is None:
                fused = self.encode(crop)
            v = crop.transform.to_crop(prior.vertices)
            obj_w, obj_h = self._obj_dims(crop)
            feats = sample_vertex_features(fused, v, obj_w, obj_h)
            raw = self.head.deform(feats).data
            beta = sigmoid(self.head.beta(feats)).data
        half = np.array([[obj_w / 2.0], [obj_h / 2.0]])
        offsets = (beta * raw * half).astype(np.float64)
        offsets[:, pinned] = 0.0
        out = crop.transform.to_image(v + offsets.T)
        out[pinned] = prior.vertices[pinned]
        return Contour(out)
