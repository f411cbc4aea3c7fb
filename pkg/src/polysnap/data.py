"""Dataset ingestion, synthetic scene generation, annotation export.

The single on-disk format is a JSON manifest next to an image directory:

    {"images":    [{"id": int, "file": "relpath", "width": int, "height": int}],
     "categories": ["name", ...],
     "instances": [{"id": int, "image_id": int, "category": "name",
                    "polygons": [[x0, y0, x1, y1, ...], ...],
                    "bbox": [x0, y0, x1, y1]?}]}

Coordinates are float pixels. Polygon arrays are even-length with at
least three points; instances may carry several rings (multi-component
objects). Missing bboxes are derived tight to the polygons. Exported
coordinates are rounded to two decimals, so export -> load is lossless
for datasets that came from a manifest in the first place.
"""

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image

from .backbone import CropPair, extract_crops
from .errors import ContractError, ManifestError
from .geometry import (
    BBox,
    Contour,
    resample_arclength,
    sample_box_contour,
    split_components,
)
from .losses import segment_match

__all__ = [
    "Dataset",
    "ImageRef",
    "InstanceAnnotation",
    "TrainSample",
    "build_sample",
    "export_manifest",
    "generate_synthetic",
    "iterate_training_pairs",
    "load_dataset",
    "load_image",
    "save_manifest",
]

SHAPE_FAMILIES = ("ellipse", "polygon", "star", "duo")


@dataclass(frozen=True)
class ImageRef:
    id: int
    file: str
    width: int
    height: int


@dataclass(frozen=True)
class InstanceAnnotation:
    id: int
    image_id: int
    category: str
    polygons: Tuple[Contour, ...]
    bbox: BBox


@dataclass(frozen=True)
class Dataset:
    root: Path
    images: Tuple[ImageRef, ...]
    categories: Tuple[str, ...]
    instances: Tuple[InstanceAnnotation, ...]
    split: str = "train"

    def image_by_id(self, image_id: int) -> ImageRef:
        for ref in self.images:
            if ref.id == image_id:
                return ref
        raise KeyError(f"no image {image_id}")

    def image_path(self, ref: ImageRef) -> Path:
        return self.root / ref.file


# ----------------------------------------------------------------- loading

def _expect(cond: bool, pointer: str, message: str):
    if not cond:
        raise ManifestError(pointer, message)


def _as_number_list(value, pointer: str) -> List[float]:
    _expect(isinstance(value, list), pointer, "expected an array of numbers")
    out = []
    for i, v in enumerate(value):
        _expect(
            isinstance(v, (int, float)) and not isinstance(v, bool),
            f"{pointer}/{i}",
            "expected a number",
        )
        out.append(float(v))
    return out


def _parse_polygon(flat, pointer: str, width: int, height: int) -> Contour:
    nums = _as_number_list(flat, pointer)
    _expect(len(nums) >= 6, pointer, f"polygon needs >= 3 points, got {len(nums)} values")
    _expect(len(nums) % 2 == 0, pointer, f"odd coordinate count {len(nums)}")
    pts = np.array(nums, dtype=np.float64).reshape(-1, 2)
    pts[:, 0] = np.clip(pts[:, 0], 0.0, float(width))
    pts[:, 1] = np.clip(pts[:, 1], 0.0, float(height))
    try:
        ring = Contour(pts)
    except ContractError as exc:
        raise ManifestError(pointer, str(exc)) from exc
    _expect(ring.area > 0.0, pointer, "degenerate polygon (zero area after clamping)")
    return ring


def load_dataset(manifest_path, split: str = "train") -> Dataset:
    """Parse and validate a manifest; errors carry a JSON pointer path."""
    path = Path(manifest_path)
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ManifestError("", f"not valid JSON: {exc}") from exc
    return dataset_from_dict(raw, root=path.parent, split=split)


def dataset_from_dict(raw: dict, root, split: str = "train") -> Dataset:
    _expect(isinstance(raw, dict), "", "manifest must be a JSON object")
    for key in ("images", "categories", "instances"):
        _expect(key in raw, f"/{key}", "missing required key")
        _expect(isinstance(raw[key], list), f"/{key}", "expected an array")

    images: List[ImageRef] = []
    dims: Dict[int, Tuple[int, int]] = {}
    for i, entry in enumerate(raw["images"]):
        p = f"/images/{i}"
        _expect(isinstance(entry, dict), p, "expected an object")
        for key, kind in (("id", int), ("file", str), ("width", int), ("height", int)):
            _expect(key in entry, f"{p}/{key}", "missing required key")
            _expect(
                isinstance(entry[key], kind) and not isinstance(entry[key], bool),
                f"{p}/{key}",
                f"expected {kind.__name__}",
            )
        _expect(entry["width"] > 0 and entry["height"] > 0, p, "non-positive image size")
        _expect(entry["id"] not in dims, f"{p}/id", f"duplicate image id {entry['id']}")
        dims[entry["id"]] = (entry["width"], entry["height"])
        images.append(ImageRef(entry["id"], entry["file"], entry["width"], entry["height"]))

    categories: List[str] = []
    for i, name in enumerate(raw["categories"]):
        _expect(isinstance(name, str) and name, f"/categories/{i}", "expected a non-empty string")
        _expect(name not in categories, f"/categories/{i}", f"duplicate category {name!r}")
        categories.append(name)

    instances: List[InstanceAnnotation] = []
    seen_ids = set()
    for i, entry in enumerate(raw["instances"]):
        p = f"/instances/{i}"
        _expect(isinstance(entry, dict), p, "expected an object")
        for key in ("id", "image_id", "category", "polygons"):
            _expect(key in entry, f"{p}/{key}", "missing required key")
        _expect(
            isinstance(entry["id"], int) and not isinstance(entry["id"], bool),
            f"{p}/id",
            "expected int",
        )
        _expect(entry["id"] not in seen_ids, f"{p}/id", f"duplicate instance id {entry['id']}")
        seen_ids.add(entry["id"])
        _expect(
            entry["image_id"] in dims,
            f"{p}/image_id",
            f"unknown image_id {entry['image_id']}",
        )
        _expect(
            entry["category"] in categories,
            f"{p}/category",
            f"unknown category {entry['category']!r}",
        )
        _expect(isinstance(entry["polygons"], list), f"{p}/polygons", "expected an array")
        _expect(len(entry["polygons"]) >= 1, f"{p}/polygons", "instance needs >= 1 polygon")
        w, h = dims[entry["image_id"]]
        rings = tuple(
            _parse_polygon(flat, f"{p}/polygons/{j}", w, h)
            for j, flat in enumerate(entry["polygons"])
        )
        derived = BBox.union(r.bounds() for r in rings)
        if "bbox" in entry:
            nums = _as_number_list(entry["bbox"], f"{p}/bbox")
            _expect(len(nums) == 4, f"{p}/bbox", f"expected 4 values, got {len(nums)}")
            _expect(nums[2] > nums[0] and nums[3] > nums[1], f"{p}/bbox", "empty box")
            box = BBox(*nums)
            eps = 1e-6
            _expect(
                box.x0 <= derived.x0 + eps
                and box.y0 <= derived.y0 + eps
                and box.x1 >= derived.x1 - eps
                and box.y1 >= derived.y1 - eps,
                f"{p}/bbox",
                "bbox does not contain the polygons",
            )
        else:
            box = derived
        instances.append(
            InstanceAnnotation(entry["id"], entry["image_id"], entry["category"], rings, box)
        )

    return Dataset(Path(root), tuple(images), tuple(categories), tuple(instances), split)


# ------------------------------------------------------------------ export

def _round2(x: float) -> float:
    return round(float(x), 2)


def polygon_to_flat(ring: Contour) -> List[float]:
    return [_round2(v) for v in ring.vertices.reshape(-1)]


def export_manifest(ds: Dataset) -> dict:
    """Manifest dict with coordinates rounded to two decimals."""
    return {
        "images": [
            {"id": r.id, "file": r.file, "width": r.width, "height": r.height}
            for r in ds.images
        ],
        "categories": list(ds.categories),
        "instances": [
            {
                "id": inst.id,
                "image_id": inst.image_id,
                "category": inst.category,
                "polygons": [polygon_to_flat(ring) for ring in inst.polygons],
                "bbox": [
                    _round2(inst.bbox.x0),
                    _round2(inst.bbox.y0),
                    _round2(inst.bbox.x1),
                    _round2(inst.bbox.y1),
                ],
            }
            for inst in ds.instances
        ],
    }


def save_manifest(ds: Dataset, path) -> Path:
    path = Path(path)
    path.write_text(json.dumps(export_manifest(ds), indent=1))
    return path


# ------------------------------------------------------------------ images

def load_image(path) -> np.ndarray:
    """Decode a PNG to float32 [3, H, W] in [0, 1]."""
    with Image.open(path) as img:
        arr = np.asarray(img.convert("RGB"), dtype=np.float32) / 255.0
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


# --------------------------------------------------------------- synthesis

def _shape_ring(rng: np.random.Generator, family: str, cx, cy, size) -> List[np.ndarray]:
    """Vertex rings for one shape instance, centered near (cx, cy)."""
    k = int(rng.integers(64, 257))
    if family == "ellipse":
        a = size * rng.uniform(0.7, 1.0)
        b = size * rng.uniform(0.45, 0.8)
        rot = rng.uniform(0, np.pi)
        t = np.linspace(0, 2 * np.pi, k, endpoint=False)
        x = a * np.cos(t)
        y = b * np.sin(t)
        xr = x * np.cos(rot) - y * np.sin(rot) + cx
        yr = x * np.sin(rot) + y * np.cos(rot) + cy
        return [np.stack([xr, yr], axis=1)]
    if family == "polygon":
        # smooth low-harmonic radial blob (a rounded free-form polygon)
        t = np.linspace(0, 2 * np.pi, k, endpoint=False)
        r = np.full(k, size * rng.uniform(0.75, 0.95))
        for h in (2, 3, 4):
            r += size * rng.uniform(0.0, 0.12) * np.cos(h * t + rng.uniform(0, 2 * np.pi))
        r = np.maximum(r, 0.3 * size)
        return [np.stack([cx + r * np.cos(t), cy + r * np.sin(t)], axis=1)]
    if family == "star":
        points = int(rng.integers(5, 9))
        outer = size * rng.uniform(0.85, 1.0)
        inner = outer * rng.uniform(0.42, 0.58)
        phase = rng.uniform(0, 2 * np.pi)
        t = phase + np.arange(2 * points) * (np.pi / points)
        rad = np.where(np.arange(2 * points) % 2 == 0, outer, inner)
        corners = np.stack([cx + rad * np.cos(t), cy + rad * np.sin(t)], axis=1)
        return [resample_arclength(Contour(corners), k).vertices]
    if family == "duo":
        # two disjoint lobes forming one multi-component instance
        gap = size * rng.uniform(1.05, 1.3)
        angle = rng.uniform(0, np.pi)
        dx, dy = np.cos(angle) * gap / 2, np.sin(angle) * gap / 2
        rings = []
        for sgn in (-1.0, 1.0):
            sub = _shape_ring(rng, "ellipse", cx + sgn * dx, cy + sgn * dy, size * 0.45)
            rings.extend(sub)
        return rings
    raise ContractError(f"unknown shape family {family!r}")


def _textured_background(rng: np.random.Generator, size: int) -> np.ndarray:
    c0 = rng.uniform(0.15, 0.85, size=3)
    c1 = rng.uniform(0.15, 0.85, size=3)
    yy, xx = np.meshgrid(np.linspace(0, 1, size), np.linspace(0, 1, size), indexing="ij")
    mix = rng.uniform(0.3, 0.7) * xx + rng.uniform(0.3, 0.7) * yy
    mix = (mix - mix.min()) / max(np.ptp(mix), 1e-9)
    img = c0[None, None, :] + mix[..., None] * (c1 - c0)[None, None, :]
    waves = 0.04 * np.sin(xx * rng.uniform(8, 20) + rng.uniform(0, 6)) * np.sin(
        yy * rng.uniform(8, 20) + rng.uniform(0, 6)
    )
    img += waves[..., None]
    img += rng.normal(0, 0.02, size=img.shape)
    return img


def _fill_color(rng: np.random.Generator, bg_mean: np.ndarray) -> np.ndarray:
    # keep the shape clearly separable from the local background
    for _ in range(20):
        c = rng.uniform(0.05, 0.95, size=3)
        if np.abs(c - bg_mean).sum() > 0.6:
            return c
    return np.where(bg_mean > 0.5, bg_mean - 0.45, bg_mean + 0.45)


def generate_synthetic(
    seed: int,
    n: int,
    out_dir,
    image_size: int = 160,
    shape_mix: Sequence[str] = ("ellipse", "polygon", "star"),
    shapes_per_image: Tuple[int, int] = (1, 3),
) -> Dataset:
    """Render ``n`` images of textured shapes and write a manifest.

    Deterministic for a given seed: per-image generators are spawned from
    one seed sequence, so image i does not depend on how many shapes were
    placed in image i-1.
    """
    if n < 1:
        raise ContractError(f"n must be >= 1, got {n}")
    for fam in shape_mix:
        if fam not in SHAPE_FAMILIES:
            raise ContractError(f"unknown shape family {fam!r}")
    lo, hi = shapes_per_image
    if lo < 1 or hi < lo:
        raise ContractError(f"bad shapes_per_image range ({lo}, {hi})")

    from .geometry import rasterize  # local import keeps module load light

    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    streams = np.random.SeedSequence(seed).spawn(n)
    images: List[ImageRef] = []
    instances: List[InstanceAnnotation] = []
    next_instance = 0
    for img_id, stream in enumerate(streams):
        rng = np.random.default_rng(stream)
        img = _textured_background(rng, image_size)
        count = int(rng.integers(lo, hi + 1))
        placed_boxes: List[BBox] = []
        margin = image_size * 0.08
        for _ in range(count):
            family = shape_mix[int(rng.integers(len(shape_mix)))]
            ring_arrays = None
            for _attempt in range(50):
                size = image_size * rng.uniform(0.10, 0.22)
                cx = rng.uniform(margin + size, image_size - margin - size)
                cy = rng.uniform(margin + size, image_size - margin - size)
                cand = _shape_ring(rng, family, cx, cy, size)
                cand = [np.round(r, 2) for r in cand]
                boxes = [Contour(r).bounds() for r in cand]
                union = BBox.union(boxes)
                pad = 3.0
                grown = BBox(union.x0 - pad, union.y0 - pad, union.x1 + pad, union.y1 + pad)
                if all(not _boxes_overlap(grown, b) for b in placed_boxes):
                    ring_arrays = cand
                    placed_boxes.append(union)
                    break
            if ring_arrays is None:
                continue
            rings = tuple(Contour(r) for r in ring_arrays)
            mask = np.zeros((image_size, image_size), dtype=bool)
            for ring in rings:
                mask |= rasterize(ring, image_size, image_size)
            if not mask.any():
                placed_boxes.pop()
                continue
            color = _fill_color(rng, img[mask].mean(axis=0))
            fill = np.tile(color, (image_size, image_size, 1))
            yy, xx = np.meshgrid(
                np.linspace(-1, 1, image_size), np.linspace(-1, 1, image_size), indexing="ij"
            )
            fill += (rng.uniform(-0.08, 0.08) * xx + rng.uniform(-0.08, 0.08) * yy)[..., None]
            fill += rng.normal(0, 0.03, size=fill.shape)
            img[mask] = fill[mask]
            instances.append(
                InstanceAnnotation(
                    next_instance,
                    img_id,
                    family,
                    rings,
                    BBox.union(r.bounds() for r in rings),
                )
            )
            next_instance += 1
        file = f"images/img_{img_id:04d}.png"
        arr = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
        Image.fromarray(arr, "RGB").save(out_dir / file)
        images.append(ImageRef(img_id, file, image_size, image_size))

    categories = tuple(sorted({inst.category for inst in instances}))
    ds = Dataset(out_dir, tuple(images), categories, tuple(instances))
    save_manifest(ds, out_dir / "manifest.json")
    return ds


def _boxes_overlap(a: BBox, b: BBox) -> bool:
    return a.x0 < b.x1 and b.x0 < a.x1 and a.y0 < b.y1 and b.y0 < a.y1


# ---------------------------------------------------------- training pairs

@dataclass(frozen=True)
class TrainSample:
    image_id: int
    instance_id: int
    category: str
    crop: CropPair
    initial: Contour
    gt: Contour
    targets: np.ndarray
    box: BBox


def build_sample(
    image: np.ndarray,
    ring: Contour,
    box: BBox,
    instance_id: int,
    image_id: int,
    category: str,
    s: float,
    k: int,
    flip: bool = False,
) -> TrainSample:
    """Crop + initial contour + matched targets for one component/instance."""
    if flip:
        w = float(image.shape[2])
        image = np.ascontiguousarray(image[:, :, ::-1])
        ring = ring.transformed(lambda p: np.stack([w - p[:, 0], p[:, 1]], axis=1))
        box = BBox(w - box.x1, box.y0, w - box.x0, box.y1)
    crop = extract_crops(image, box, s)
    initial = sample_box_contour(box, k)
    match = segment_match(initial, ring, box)
    return TrainSample(image_id, instance_id, category, crop, initial, ring, match.targets, box)


def iterate_training_pairs(
    ds: Dataset,
    mode: str = "per-instance",
    s: float = 1.5,
    k: int = 128,
    image_cache: Optional[Dict[int, np.ndarray]] = None,
) -> Iterator[TrainSample]:
    """One sample per instance, or per polygon ring in per-component mode."""
    if mode not in ("per-instance", "per-component"):
        raise ContractError(f"unknown mode {mode!r}")
    by_image: Dict[int, List[InstanceAnnotation]] = {}
    for inst in ds.instances:
        by_image.setdefault(inst.image_id, []).append(inst)
    for ref in ds.images:
        if ref.id not in by_image:
            continue
        if image_cache is not None and ref.id in image_cache:
            image = image_cache[ref.id]
        else:
            image = load_image(ds.image_path(ref))
            if image_cache is not None:
                image_cache[ref.id] = image
        for inst in by_image[ref.id]:
            for ring, box in split_components(inst.polygons, mode):
                yield build_sample(
                    image, ring, box, inst.id, ref.id, inst.category, s, k
                )
