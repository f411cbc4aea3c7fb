"""Polygon and contour primitives.

Conventions used throughout the package:

* Continuous image coordinates: ``x`` grows right, ``y`` grows down. The
  pixel at row ``i``, column ``j`` has its center at ``(j + 0.5, i + 0.5)``.
* Contours are closed rings stored CCW-canonical, meaning positive signed
  area under the shoelace formula in the raw (y-down) coordinates. On
  screen that is the clockwise walking direction; the box sampler emits
  top-left -> top-right -> bottom-right -> bottom-left, which is already
  canonical.
* Rasterization uses even-odd scanline filling: a pixel is covered iff its
  center lies inside the polygon. Crossings are counted at or left of the
  center, so a ring edge running exactly through pixel centers covers them
  on its left side and not on its right (half-open, matching the
  ``min(y) <= yc < max(y)`` rule used vertically).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import ContractError, ShapeError

__all__ = [
    "BBox",
    "Contour",
    "sample_box_contour",
    "rasterize",
    "mask_iou",
    "normalize_coords",
    "resample_arclength",
    "split_components",
    "contour_box_intersections",
    "box_arc_position",
    "point_on_box_arc",
]


@dataclass(frozen=True)
class BBox:
    """Axis-aligned box with ``x1 > x0`` and ``y1 > y0`` (float pixels)."""

    x0: float
    y0: float
    x1: float
    y1: float

    def __post_init__(self):
        if not (self.x1 > self.x0 and self.y1 > self.y0):
            raise ContractError(f"degenerate box {self}")

    @property
    def width(self) -> float:
        return self.x1 - self.x0

    @property
    def height(self) -> float:
        return self.y1 - self.y0

    @property
    def perimeter(self) -> float:
        return 2.0 * (self.width + self.height)

    def corners(self) -> np.ndarray:
        """Corners in canonical ring order TL, TR, BR, BL."""
        return np.array(
            [
                [self.x0, self.y0],
                [self.x1, self.y0],
                [self.x1, self.y1],
                [self.x0, self.y1],
            ],
            dtype=np.float64,
        )

    def contains(self, pts: np.ndarray) -> np.ndarray:
        pts = np.asarray(pts, dtype=np.float64)
        return (
            (pts[..., 0] >= self.x0)
            & (pts[..., 0] <= self.x1)
            & (pts[..., 1] >= self.y0)
            & (pts[..., 1] <= self.y1)
        )

    @staticmethod
    def union(boxes: Iterable["BBox"]) -> "BBox":
        boxes = list(boxes)
        return BBox(
            min(b.x0 for b in boxes),
            min(b.y0 for b in boxes),
            max(b.x1 for b in boxes),
            max(b.y1 for b in boxes),
        )


def _signed_area(verts: np.ndarray) -> float:
    x = verts[:, 0]
    y = verts[:, 1]
    return 0.5 * float(np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y))


class Contour:
    """Closed ring of K >= 3 vertices, stored as an (K, 2) float64 array.

    Exact consecutive duplicate vertices are dropped on construction and the
    orientation is normalized to canonical (positive signed area) when the
    ring has nonzero area. Degenerate zero-area rings are allowed; they
    rasterize to nothing.
    """

    __slots__ = ("vertices",)

    def __init__(self, vertices):
        v = np.asarray(vertices, dtype=np.float64)
        if v.ndim != 2 or v.shape[1] != 2:
            raise ShapeError(f"contour must be (K, 2), got {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ContractError("contour has non-finite vertices")
        keep = np.any(v != np.roll(v, 1, axis=0), axis=1)
        if not keep.any():
            raise ContractError("contour vertices are all identical")
        v = v[keep]
        if len(v) < 3:
            raise ContractError(f"contour needs >= 3 distinct vertices, got {len(v)}")
        if _signed_area(v) < 0.0:
            v = v[::-1].copy()
        self.vertices = np.ascontiguousarray(v)

    def __len__(self) -> int:
        return len(self.vertices)

    @property
    def signed_area(self) -> float:
        return _signed_area(self.vertices)

    @property
    def area(self) -> float:
        return abs(self.signed_area)

    def edge_lengths(self) -> np.ndarray:
        d = np.roll(self.vertices, -1, axis=0) - self.vertices
        return np.hypot(d[:, 0], d[:, 1])

    @property
    def perimeter(self) -> float:
        return float(self.edge_lengths().sum())

    def arc_positions(self) -> np.ndarray:
        """Cumulative arc length at each vertex; arc_positions()[0] == 0."""
        lens = self.edge_lengths()
        return np.concatenate(([0.0], np.cumsum(lens)[:-1]))

    def point_at_arc(self, arc) -> np.ndarray:
        """Point(s) at cumulative arc position(s), wrapping modulo perimeter."""
        arc = np.atleast_1d(np.asarray(arc, dtype=np.float64))
        per = self.perimeter
        if per <= 0.0:
            raise ContractError("zero-length contour")
        s = np.mod(arc, per)
        starts = self.arc_positions()
        lens = self.edge_lengths()
        idx = np.clip(np.searchsorted(starts, s, side="right") - 1, 0, len(lens) - 1)
        t = (s - starts[idx]) / np.where(lens[idx] > 0, lens[idx], 1.0)
        a = self.vertices[idx]
        b = self.vertices[(idx + 1) % len(self)]
        return a + (b - a) * t[:, None]

    def bounds(self) -> BBox:
        v = self.vertices
        return BBox(v[:, 0].min(), v[:, 1].min(), v[:, 0].max(), v[:, 1].max())

    def translated(self, dx: float, dy: float) -> "Contour":
        return Contour(self.vertices + np.array([dx, dy]))

    def transformed(self, fn) -> "Contour":
        return Contour(fn(self.vertices))


def sample_box_contour(box: BBox, k: int) -> Contour:
    """Sample ``k`` points on the box ring, uniform in perimeter arc length.

    Walk starts at the top-left corner and proceeds TL -> TR -> BR -> BL
    (the canonical ring direction), so spacing is exactly perimeter/k. All
    four corners land on samples whenever both side lengths are multiples
    of the spacing (square boxes with k divisible by 4, and commensurate
    rectangles in general).
    """
    if k < 4 or k % 4 != 0:
        raise ContractError(f"k must be >= 4 and divisible by 4, got {k}")
    ring = Contour(box.corners())
    arcs = np.arange(k, dtype=np.float64) * (ring.perimeter / k)
    return Contour(ring.point_at_arc(arcs))


def _rings_of(poly) -> list[np.ndarray]:
    if isinstance(poly, Contour):
        return [poly.vertices]
    return [c.vertices for c in poly]


def rasterize(poly, width: int, height: int) -> np.ndarray:
    """Even-odd scanline fill of one contour or a sequence of contours.

    Pixel (i, j) is set iff its center ``(j + 0.5, i + 0.5)`` is inside
    under the even-odd rule; an edge crossing at exactly the center x
    counts as left-of-center. Disjoint rings therefore fill to their
    union, and overlapping rings XOR.
    """
    if width < 1 or height < 1:
        raise ContractError("mask dims must be >= 1")
    mask = np.zeros((height, width), dtype=bool)
    edges = []
    for verts in _rings_of(poly):
        nxt = np.roll(verts, -1, axis=0)
        edges.append(np.concatenate([verts, nxt], axis=1))
    if not edges:
        return mask
    e = np.concatenate(edges, axis=0)  # columns: x0 y0 x1 y1
    x0, y0, x1, y1 = e[:, 0], e[:, 1], e[:, 2], e[:, 3]
    nonflat = y0 != y1
    x0, y0, x1, y1 = x0[nonflat], y0[nonflat], x1[nonflat], y1[nonflat]
    if len(x0) == 0:
        return mask
    centers = np.arange(width, dtype=np.float64) + 0.5
    ymin = np.minimum(y0, y1)
    ymax = np.maximum(y0, y1)
    for i in range(height):
        yc = i + 0.5
        hit = (ymin <= yc) & (yc < ymax)
        if not hit.any():
            continue
        t = (yc - y0[hit]) / (y1[hit] - y0[hit])
        xs = np.sort(x0[hit] + t * (x1[hit] - x0[hit]))
        mask[i] = (np.searchsorted(xs, centers, side="right") % 2).astype(bool)
    return mask


def mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    """Intersection over union of two boolean masks; both empty -> 1.0."""
    if a.shape != b.shape:
        raise ShapeError(f"mask shapes differ: {a.shape} vs {b.shape}")
    a = a.astype(bool)
    b = b.astype(bool)
    union = int(np.logical_or(a, b).sum())
    if union == 0:
        return 1.0
    inter = int(np.logical_and(a, b).sum())
    return inter / union


def normalize_coords(contour: Contour, obj_width: float, obj_height: float) -> np.ndarray:
    """Relative vertex coordinates: subtract the per-axis minimum over the
    ring, then divide x by ``obj_width`` and y by ``obj_height``.

    Translation-invariant, and invariant under scaling the ring and the
    object dims together.
    """
    if obj_width <= 0 or obj_height <= 0:
        raise ContractError("object extent must be positive")
    v = contour.vertices
    out = np.empty_like(v)
    out[:, 0] = (v[:, 0] - v[:, 0].min()) / obj_width
    out[:, 1] = (v[:, 1] - v[:, 1].min()) / obj_height
    return out


def resample_arclength(contour: Contour, k: int) -> Contour:
    """Resample to ``k`` points uniform in arc length, keeping the first point."""
    if k < 3:
        raise ContractError(f"k must be >= 3, got {k}")
    per = contour.perimeter
    if per <= 0.0:
        raise ContractError("cannot resample zero-length contour")
    arcs = np.arange(k, dtype=np.float64) * (per / k)
    return Contour(contour.point_at_arc(arcs))


def split_components(polygons: Sequence[Contour], mode: str = "per-component"):
    """Break an annotation's rings into (contour, box) work units.

    ``per-component`` yields one entry per ring with its tight bounds.
    ``per-instance`` yields a single entry: the largest-area ring stands in
    for the instance and the box covers all rings.
    """
    rings = list(polygons)
    if not rings:
        raise ContractError("no polygons")
    if mode == "per-component":
        return [(c, c.bounds()) for c in rings]
    if mode == "per-instance":
        biggest = max(rings, key=lambda c: c.area)
        return [(biggest, BBox.union(c.bounds() for c in rings))]
    raise ContractError(f"unknown mode {mode!r}")


def _seg_intersections(p0, p1, q0, q1):
    """Intersection parameters of segment p0->p1 with segment q0->q1.

    Returns a list of t in [0, 1] along p where the segments meet.
    Collinear overlaps are ignored (they are not transversal crossings).
    """
    r = p1 - p0
    s = q1 - q0
    denom = r[0] * s[1] - r[1] * s[0]
    if denom == 0.0:
        return []
    qp = q0 - p0
    t = (qp[0] * s[1] - qp[1] * s[0]) / denom
    u = (qp[0] * r[1] - qp[1] * r[0]) / denom
    eps = 1e-12
    if -eps <= t <= 1.0 + eps and -eps <= u <= 1.0 + eps:
        return [min(max(t, 0.0), 1.0)]
    return []


def contour_box_intersections(gt: Contour, box: BBox):
    """Points where the ring's edges cross the box ring, ordered by gt arc.

    Returns a list of ``(point ndarray[2], gt_arc float)``. Touches that
    produce coincident hits (a vertex exactly on the box, or a corner
    crossing seen by two box edges) are deduplicated to a single entry.
    """
    verts = gt.vertices
    n = len(verts)
    starts = gt.arc_positions()
    lens = gt.edge_lengths()
    corners = box.corners()
    hits = []
    for i in range(n):
        p0 = verts[i]
        p1 = verts[(i + 1) % n]
        for j in range(4):
            for t in _seg_intersections(p0, p1, corners[j], corners[(j + 1) % 4]):
                pt = p0 + t * (p1 - p0)
                hits.append((starts[i] + t * lens[i], pt))
    if not hits:
        return []
    hits.sort(key=lambda h: h[0])
    per = gt.perimeter
    out = []
    for arc, pt in hits:
        dup = False
        for arc2, pt2 in out:
            if np.hypot(*(pt - pt2)) < 1e-9 * max(per, 1.0):
                dup = True
                break
        if not dup:
            out.append((arc, pt))
    # A touch at the ring start can reappear near arc == perimeter.
    if len(out) > 1 and np.hypot(*(out[0][1] - out[-1][1])) < 1e-9 * max(per, 1.0):
        out.pop()
    return [(pt, arc) for arc, pt in out]


def box_arc_position(box: BBox, point) -> float:
    """Arc-length position of a point along the box ring (TL start).

    The point is projected onto the nearest box edge first, so slightly
    off-ring inputs are tolerated.
    """
    ring = Contour(box.corners())
    verts = ring.vertices
    starts = ring.arc_positions()
    lens = ring.edge_lengths()
    p = np.asarray(point, dtype=np.float64)
    best = (np.inf, 0.0)
    for i in range(4):
        a = verts[i]
        d = verts[(i + 1) % 4] - a
        L2 = float(d @ d)
        t = 0.0 if L2 == 0 else min(max(float((p - a) @ d) / L2, 0.0), 1.0)
        proj = a + t * d
        dist = float(np.hypot(*(p - proj)))
        if dist < best[0]:
            best = (dist, starts[i] + t * lens[i])
    return best[1] % ring.perimeter


def point_on_box_arc(box: BBox, arc: float) -> np.ndarray:
    """Inverse of :func:`box_arc_position` for on-ring arc values."""
    ring = Contour(box.corners())
    return ring.point_at_arc(arc)[0]
