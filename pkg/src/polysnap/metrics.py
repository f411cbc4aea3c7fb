"""Evaluation metrics: per-category mIoU, pooled mAP, boundary F-score.

IoU is computed per instance and averaged within each category; the
headline mIoU is the unweighted mean of those category means, not the
instance mean. mAP pools all instances regardless of category and
thresholds IoU from 0.50 to 0.95 in 0.05 steps; with one prediction per
box there is no confidence ranking, so AP at a threshold reduces to the
fraction of instances at or above it.

Boundary F uses 1-px boundary maps (mask XOR its erosion by a 3x3 block,
pixels outside the image counted as foreground, so the image frame is
never a boundary) and dilation by a discrete Euclidean disk of radius
tolerance + 0.5. Aggregation is per-instance F, then the mean.
"""

from dataclasses import dataclass, field
from typing import Dict, Iterable, Mapping, Sequence, Tuple

import numpy as np

from .errors import ContractError

__all__ = [
    "EvalRecord",
    "boundary_f",
    "build_report",
    "category_miou",
    "format_report",
    "map_50_95",
]

MAP_THRESHOLDS = tuple((50 + 5 * i) / 100.0 for i in range(10))


@dataclass(frozen=True)
class EvalRecord:
    """Per-instance evaluation result."""

    instance_id: int
    category: str
    iou: float
    f_scores: Mapping[int, float] = field(default_factory=dict)

    def __post_init__(self):
        if not 0.0 <= self.iou <= 1.0:
            raise ContractError(f"iou {self.iou} outside [0, 1]")
        for tol, f in self.f_scores.items():
            if not 0.0 <= f <= 1.0:
                raise ContractError(f"f score {f} at tolerance {tol} outside [0, 1]")


def category_miou(records: Sequence[EvalRecord]) -> Tuple[Dict[str, float], float]:
    """Per-category mean IoUs and their unweighted overall mean."""
    if not records:
        raise ContractError("category_miou needs at least one record")
    sums: Dict[str, list] = {}
    for r in records:
        sums.setdefault(r.category, []).append(r.iou)
    per_cat = {c: float(np.mean(v)) for c, v in sorted(sums.items())}
    return per_cat, float(np.mean(list(per_cat.values())))


def map_50_95(records: Sequence[EvalRecord]) -> float:
    """Mean over IoU thresholds 0.50..0.95 of the fraction of instances passing."""
    if not records:
        raise ContractError("map_50_95 needs at least one record")
    ious = np.array([r.iou for r in records])
    return float(np.mean([(ious >= t).mean() for t in MAP_THRESHOLDS]))


def _erode(mask: np.ndarray) -> np.ndarray:
    # 3x3 block erosion; outside the image counts as foreground
    p = np.pad(mask, 1, constant_values=True)
    out = np.ones_like(mask)
    for di in (0, 1, 2):
        for dj in (0, 1, 2):
            out &= p[di : di + mask.shape[0], dj : dj + mask.shape[1]]
    return out


def _disk_offsets(tolerance: int) -> list:
    r2 = (tolerance + 0.5) ** 2
    span = range(-tolerance, tolerance + 1)
    return [(di, dj) for di in span for dj in span if di * di + dj * dj <= r2]


def _dilate(mask: np.ndarray, tolerance: int) -> np.ndarray:
    t = tolerance
    p = np.pad(mask, t, constant_values=False)
    out = np.zeros_like(mask)
    for di, dj in _disk_offsets(t):
        out |= p[t + di : t + di + mask.shape[0], t + dj : t + dj + mask.shape[1]]
    return out


def boundary_map(mask: np.ndarray) -> np.ndarray:
    """1-px boundary: mask minus its erosion."""
    m = mask.astype(bool)
    return m & ~_erode(m)


def boundary_f(pred_mask: np.ndarray, gt_mask: np.ndarray, tolerance_px: int) -> float:
    """F-score between boundary maps within a pixel tolerance."""
    if pred_mask.shape != gt_mask.shape:
        raise ContractError(
            f"mask shapes differ: {pred_mask.shape} vs {gt_mask.shape}"
        )
    if tolerance_px < 1:
        raise ContractError(f"tolerance must be >= 1, got {tolerance_px}")
    pb = boundary_map(pred_mask)
    gb = boundary_map(gt_mask)
    np_, ng = int(pb.sum()), int(gb.sum())
    if np_ == 0 and ng == 0:
        return 1.0
    if np_ == 0 or ng == 0:
        return 0.0
    precision = float((pb & _dilate(gb, tolerance_px)).sum()) / np_
    recall = float((gb & _dilate(pb, tolerance_px)).sum()) / ng
    if precision + recall == 0.0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


def build_report(records: Sequence[EvalRecord], tolerances: Iterable[int] = (1, 2)) -> dict:
    """Aggregate records into a JSON-serializable report."""
    per_cat, miou = category_miou(records)
    report = {
        "instances": len(records),
        "miou": miou,
        "per_category": per_cat,
        "map_50_95": map_50_95(records),
        "boundary_f": {},
    }
    for tol in tolerances:
        vals = [r.f_scores[tol] for r in records if tol in r.f_scores]
        report["boundary_f"][str(tol)] = float(np.mean(vals)) if vals else None
    return report


def format_report(report: dict) -> str:
    """Fixed-width text table for terminals and logs."""
    lines = [
        f"instances      {report['instances']}",
        f"mIoU           {report['miou']:.4f}",
        f"mAP@[.50:.95]  {report['map_50_95']:.4f}",
    ]
    for tol, val in report["boundary_f"].items():
        shown = "n/a" if val is None else f"{val:.4f}"
        lines.append(f"F @ {tol}px       {shown}")
    lines.append("per-category IoU")
    for cat, iou in report["per_category"].items():
        lines.append(f"  {cat:<12s} {iou:.4f}")
    return "\n".join(lines)
