"""Ground-truth assignment and the training objective.

Matching splits the ground-truth ring at its crossings with the prompt
box and assigns each initial vertex to the segment whose box-arc
interval contains it; targets are then spread uniformly along the
matched ground-truth segment in traversal order, so assignments never
cross inside a segment. Rings that never touch the box fall back to a
global cyclic alignment.

The objective is L = L_Dice + alpha * L_vertex: a box-normalized smooth
L1 over matched vertex pairs, plus a Dice loss pushing the attentive
merge gate beta toward the still-inaccurate vertices.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, TrainingError
from .geometry import (
    BBox,
    Contour,
    box_arc_position,
    contour_box_intersections,
    resample_arclength,
)
from .tensor import Tensor, smooth_l1, sum_all

EPS = 1e-6


@dataclass(frozen=True)
class MatchResult:
    """One ground-truth target per initial vertex.

    ``segment_id[k]`` is the index of the ground-truth segment vertex k
    was matched into, or -1 for the no-intersection fallback path.
    """

    targets: np.ndarray  # (K, 2) float64, points on the gt ring
    segment_id: np.ndarray  # (K,) int
    valid: np.ndarray  # (K,) bool


def _fallback_match(initial: Contour, gt: Contour) -> MatchResult:
    """Global alignment: resample gt to K and pick the best cyclic shift.

    Cost is total squared distance; ties go to the smallest shift.
    """
    k = len(initial)
    gt_pts = resample_arclength(gt, k).vertices
    init = initial.vertices
    d2 = ((init[:, None, :] - gt_pts[None, :, :]) ** 2).sum(axis=2)
    rows = np.arange(k)
    costs = np.array([d2[rows, (rows + r) % k].sum() for r in range(k)])
    rot = int(np.argmin(costs))
    targets = gt_pts[(rows + rot) % k]
    return MatchResult(
        targets=targets,
        segment_id=np.full(k, -1, dtype=np.intp),
        valid=np.ones(k, dtype=bool),
    )


def segment_match(initial: Contour, gt: Contour, box: BBox) -> MatchResult:
    """Assign one gt target to every initial (box-ring) vertex.

    The crossings of gt with the box split gt into segments; each
    crossing also marks a position on the box ring, and the sorted
    positions tile the ring into intervals. A vertex belongs to the
    segment whose interval holds its own box-arc position, and the
    vertices of a segment receive uniform arc-length samples of that gt
    segment, in traversal order starting at the crossing.
    """
    if gt.area <= 0.0:
        raise ContractError("ground-truth contour has zero area")
    hits = contour_box_intersections(gt, box)
    if not hits:
        return _fallback_match(initial, gt)

    gt_per = gt.perimeter
    box_per = box.perimeter
    k = len(initial)
    gt_arcs = np.array([arc for _, arc in hits])
    box_arcs = np.array([box_arc_position(box, pt) for pt, _ in hits])
    n_seg = len(hits)
    seg_len = (np.roll(gt_arcs, -1) - gt_arcs) % gt_per
    if n_seg == 1:
        seg_len[0] = gt_per

    # tile the box ring by the sorted crossing positions
    order = np.argsort(box_arcs, kind="stable")
    sorted_arcs = box_arcs[order]
    vert_arcs = np.array([box_arc_position(box, v) for v in initial.vertices])
    slot = np.searchsorted(sorted_arcs, vert_arcs, side="right") - 1  # -1 wraps to last
    seg_of_vert = order[slot]

    targets = np.empty((k, 2), dtype=np.float64)
    for i in range(n_seg):
        members = np.flatnonzero(seg_of_vert == i)
        if members.size == 0:
            continue
        offs = (vert_arcs[members] - box_arcs[i]) % box_per
        members = members[np.argsort(offs, kind="stable")]
        n = members.size
        # inclusive start: the first sample sits on the crossing itself, so
        # a ring identical to the box matches every vertex to itself
        arcs = gt_arcs[i] + np.arange(n) * (seg_len[i] / n)
        targets[members] = gt.point_at_arc(arcs)
    return MatchResult(
        targets=targets,
        segment_id=seg_of_vert.astype(np.intp),
        valid=np.ones(k, dtype=bool),
    )


def vertex_loss(pred: Tensor, targets: np.ndarray, w: float) -> Tensor:
    """Box-normalized smooth L1: (1/K) sum over vertices of the per-axis sum.

    ``pred`` is [2,K]; ``targets`` is (K,2) in the same coordinates;
    ``w`` is the normalizing box side (max of width and height).
    """
    if w <= 0:
        raise ContractError(f"normalizer W must be positive, got {w}")
    k = pred.shape[1]
    if targets.shape != (k, 2):
        raise ContractError(f"targets {targets.shape} do not match prediction ring of {k}")
    t = Tensor(np.ascontiguousarray(targets.T))
    diff = (pred - t) * (1.0 / w)
    return sum_all(smooth_l1(diff)) * (1.0 / k)


def modulation_loss(
    beta: Tensor, pred: np.ndarray, targets: np.ndarray, w: float, tau: float = 0.02
) -> Tensor:
    """Dice loss steering beta toward the still-inaccurate vertices.

    The binary target marks vertices whose error exceeds ``tau`` of the
    box side ``w``. With no inaccurate vertices and beta already near
    zero the loss is defined as 0 (nothing left to gate).
    """
    if w <= 0:
        raise ContractError(f"normalizer W must be positive, got {w}")
    err = np.linalg.norm(np.asarray(pred, dtype=np.float64) - targets, axis=1) / w
    m = (err > tau).astype(np.float32)[None, :]
    m_sum = float(m.sum())
    beta_sum = sum_all(beta)
    if m_sum == 0.0 and float(beta_sum.data) < EPS:
        return Tensor(np.float32(0.0))
    overlap = sum_all(beta * Tensor(m)) * 2.0
    return 1.0 - overlap / (beta_sum + (m_sum + EPS))


def total_loss(l_vertex: Tensor, l_dice: Tensor, alpha: float = 10.0) -> Tensor:
    """Combined objective L = L_Dice + alpha * L_vertex."""
    if np.isnan(l_vertex.data) or np.isnan(l_dice.data):
        raise TrainingError(
            f"non-finite loss: vertex={float(l_vertex.data)} dice={float(l_dice.data)}"
        )
    return l_dice + l_vertex * alpha
