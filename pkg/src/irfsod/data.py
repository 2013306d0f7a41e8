"""Datasets: COCO-format loading, base/novel splits, support sampling, and
a synthetic shapes generator for desk-scale experiments.

Boxes are stored in corner convention internally; COCO's (x, y, w, h) is
converted at this boundary. Crowd annotations are excluded. Generated
shapes datasets carry their base/novel split in the annotations file under
a top-level "splits" key, so they round-trip through the loader.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

from .errors import DataError
from .geometry import Box

# The 20 categories shared with PASCAL VOC, by COCO category id: the usual
# novel set for the 80-category COCO benchmark (the other 60 are base).
COCO_VOC_NOVEL_IDS = (1, 2, 3, 4, 5, 6, 7, 9, 16, 17, 18, 19, 20, 21, 44, 62, 63, 64, 67, 72)


@dataclass(frozen=True)
class Annotation:
    category: int
    box: Box


@dataclass
class ImageRecord:
    image_id: int
    file_name: str
    path: Path
    width: int
    height: int
    annotations: list[Annotation] = field(default_factory=list)


@dataclass(frozen=True)
class SplitSpec:
    """Disjoint base/novel category id sets."""

    base: tuple[int, ...]
    novel: tuple[int, ...]

    def __post_init__(self):
        overlap = set(self.base) & set(self.novel)
        if overlap:
            raise DataError(f"base and novel categories overlap: {sorted(overlap)}")


@dataclass
class DatasetSplit:
    base_categories: frozenset[int]
    novel_categories: frozenset[int]
    records: list[ImageRecord]
    category_names: dict[int, str]

    def visible_categories(self) -> set[int]:
        seen: set[int] = set()
        for rec in self.records:
            seen.update(a.category for a in rec.annotations)
        return seen


@dataclass(frozen=True)
class SupportInstance:
    record: ImageRecord
    box: Box


@dataclass
class SupportSet:
    """K annotated instances (image, box) of one category."""

    category: int
    items: list[SupportInstance]

    def __post_init__(self):
        if not self.items:
            raise DataError("a support set needs at least one instance")

    @property
    def shots(self) -> int:
        return len(self.items)


def coco_voc_split(all_category_ids) -> SplitSpec:
    """The 20-novel / 60-base COCO preset, applied to the ids present."""
    ids = sorted(int(i) for i in all_category_ids)
    novel = tuple(i for i in ids if i in COCO_VOC_NOVEL_IDS)
    base = tuple(i for i in ids if i not in COCO_VOC_NOVEL_IDS)
    return SplitSpec(base=base, novel=novel)


@lru_cache(maxsize=2048)
def _load_image_cached(path: str) -> np.ndarray:
    with Image.open(path) as img:
        return np.asarray(img.convert("RGB"))


def load_image(path: str | Path) -> np.ndarray:
    """Decode an image file to an (H, W, 3) uint8 RGB array (cached)."""
    path = Path(path)
    if not path.is_file():
        raise DataError(f"image file not found: {path}")
    return _load_image_cached(str(path))


def load_coco_annotations(path: str | Path, split: SplitSpec | None = None,
                          visible: str = "base",
                          images_root: str | Path | None = None) -> DatasetSplit:
    """Load a COCO-format annotation file into a category-filtered split.

    ``visible`` selects which annotations records expose: "base", "novel",
    or "all". If ``split`` is None the file must carry a "splits" key (as
    written by the shapes generator).
    """
    path = Path(path)
    if not path.is_file():
        raise DataError(f"annotation file not found: {path}")
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"malformed annotation JSON in {path}: {exc}") from exc
    for key in ("images", "annotations", "categories"):
        if key not in raw:
            raise DataError(f"annotation file missing {key!r} section: {path}")

    category_names = {int(c["id"]): str(c["name"]) for c in raw["categories"]}
    if split is None:
        meta = raw.get("splits")
        if not meta:
            raise DataError(f"no split given and no 'splits' metadata in {path}")
        split = SplitSpec(base=tuple(int(i) for i in meta["base"]),
                          novel=tuple(int(i) for i in meta["novel"]))
    unknown_split = (set(split.base) | set(split.novel)) - set(category_names)
    if unknown_split:
        raise DataError(f"split names unknown category ids: {sorted(unknown_split)}")

    if visible == "base":
        keep = set(split.base)
    elif visible == "novel":
        keep = set(split.novel)
    elif visible == "all":
        keep = set(split.base) | set(split.novel)
    else:
        raise DataError(f"visible must be base/novel/all, got {visible!r}")

    images_root = Path(images_root) if images_root is not None else path.parent / "images"
    records: dict[int, ImageRecord] = {}
    for im in raw["images"]:
        image_id = int(im["id"])
        file_name = str(im["file_name"])
        records[image_id] = ImageRecord(
            image_id=image_id, file_name=file_name, path=images_root / file_name,
            width=int(im["width"]), height=int(im["height"]))

    for ann in raw["annotations"]:
        cat = int(ann["category_id"])
        if cat not in category_names:
            raise DataError(f"annotation {ann.get('id')} names unknown category {cat}")
        if int(ann.get("iscrowd", 0)):
            continue
        if cat not in keep:
            continue
        image_id = int(ann["image_id"])
        if image_id not in records:
            raise DataError(f"annotation {ann.get('id')} names unknown image {image_id}")
        x, y, w, h = (float(v) for v in ann["bbox"])
        if w <= 0 or h <= 0:
            continue  # degenerate boxes are unusable for IoU matching
        records[image_id].annotations.append(
            Annotation(category=cat, box=Box.from_xywh(x, y, w, h)))

    return DatasetSplit(base_categories=frozenset(split.base),
                        novel_categories=frozenset(split.novel),
                        records=list(records.values()),
                        category_names=category_names)


def instances_of(split: DatasetSplit, category: int) -> list[SupportInstance]:
    """All annotated instances of one category across the split's records."""
    out = []
    for rec in split.records:
        for ann in rec.annotations:
            if ann.category == category:
                out.append(SupportInstance(record=rec, box=ann.box))
    return out


def sample_support_sets(split: DatasetSplit, categories, k: int,
                        rng: np.random.Generator) -> list[SupportSet]:
    """K distinct instances per category, uniform without replacement."""
    sets = []
    for category in categories:
        pool = instances_of(split, int(category))
        if len(pool) < k:
            raise DataError(
                f"category {category} has {len(pool)} instances, need {k}")
        chosen = rng.choice(len(pool), size=k, replace=False)
        sets.append(SupportSet(category=int(category),
                               items=[pool[int(i)] for i in chosen]))
    return sets


# ---------------------------------------------------------------------------
# Synthetic shapes dataset
# ---------------------------------------------------------------------------

SHAPE_KINDS = ("circle", "square", "triangle", "star", "cross")

# Category-characteristic base colors; per-instance jitter is applied on top.
# Category-tied color makes desk-scale training converge quickly while shape
# still carries the localization signal. color_mode="random" removes the cue.
_BASE_COLORS = {
    "circle": (215, 70, 70),
    "square": (70, 120, 215),
    "triangle": (80, 195, 95),
    "star": (230, 200, 70),
    "cross": (200, 95, 205),
}
_EXTRA_COLORS = ((240, 140, 60), (90, 205, 200), (160, 160, 90), (130, 80, 200))


@dataclass
class ShapesSpec:
    """Parameters of the generated dataset. Classes beyond the five named
    kinds are rejected; novel classes must be a subset of classes."""

    classes: tuple[str, ...] = ("circle", "square", "triangle", "star", "cross")
    novel_classes: tuple[str, ...] = ("star", "cross")
    images: int = 300
    image_size: int = 96
    min_instances: int = 1
    max_instances: int = 3
    min_size: int = 16
    max_size: int = 44
    color_mode: str = "category"
    color_jitter: int = 25
    background_noise: int = 8
    max_placement_iou: float = 0.15

    def validate(self):
        unknown = [c for c in self.classes if c not in SHAPE_KINDS]
        if unknown:
            raise DataError(f"unknown shape classes {unknown}; known: {SHAPE_KINDS}")
        if not set(self.novel_classes) <= set(self.classes):
            raise DataError("novel_classes must be a subset of classes")
        if len(set(self.classes)) != len(self.classes):
            raise DataError("duplicate shape classes")
        if self.images < 1 or self.image_size < 16:
            raise DataError("need at least 1 image of size >= 16")
        if not (1 <= self.min_instances <= self.max_instances):
            raise DataError("bad instance count range")
        if not (4 <= self.min_size <= self.max_size < self.image_size):
            raise DataError("bad object size range")
        if self.color_mode not in ("category", "random"):
            raise DataError("color_mode must be 'category' or 'random'")


def _shape_vertices(kind: str, x1: int, y1: int, x2: int, y2: int) -> list[tuple[int, int]]:
    """Integer polygon vertices for polygonal kinds; extremes define the GT box."""
    if kind == "triangle":
        return [(x1, y2 - 1), (x2 - 1, y2 - 1), ((x1 + x2 - 1) // 2, y1)]
    cx, cy = (x1 + x2 - 1) / 2.0, (y1 + y2 - 1) / 2.0
    rx, ry = (x2 - 1 - x1) / 2.0, (y2 - 1 - y1) / 2.0
    if kind == "star":
        pts = []
        for i in range(10):
            angle = -np.pi / 2 + i * np.pi / 5
            rad = 1.0 if i % 2 == 0 else 0.45
            pts.append((int(round(cx + rad * rx * np.cos(angle))),
                        int(round(cy + rad * ry * np.sin(angle)))))
        return pts
    if kind == "cross":
        tx = max(1, int(round(rx * 0.6)))
        ty = max(1, int(round(ry * 0.6)))
        icx, icy = int(round(cx)), int(round(cy))
        return [(icx - tx, y1), (icx + tx, y1), (icx + tx, icy - ty),
                (x2 - 1, icy - ty), (x2 - 1, icy + ty), (icx + tx, icy + ty),
                (icx + tx, y2 - 1), (icx - tx, y2 - 1), (icx - tx, icy + ty),
                (x1, icy + ty), (x1, icy - ty), (icx - tx, icy - ty)]
    raise ValueError(kind)


def _draw_shape(draw: ImageDraw.ImageDraw, kind: str, x1: int, y1: int,
                x2: int, y2: int, color: tuple[int, int, int]) -> Box:
    """Draw one filled shape; returns the tight GT box in corner convention.

    PIL's rectangle/ellipse include their end coordinates, so drawing to
    (x2 - 1, y2 - 1) fills pixels x1..x2-1, giving the tight box (x1, y1, x2, y2).
    """
    if kind == "circle":
        draw.ellipse([x1, y1, x2 - 1, y2 - 1], fill=color)
        return Box(x1, y1, x2, y2)
    if kind == "square":
        draw.rectangle([x1, y1, x2 - 1, y2 - 1], fill=color)
        return Box(x1, y1, x2, y2)
    pts = _shape_vertices(kind, x1, y1, x2, y2)
    draw.polygon(pts, fill=color)
    xs = [p[0] for p in pts]
    ys = [p[1] for p in pts]
    return Box(min(xs), min(ys), max(xs) + 1, max(ys) + 1)


def _instance_color(kind: str, class_index: int, spec: ShapesSpec,
                    rng: np.random.Generator) -> tuple[int, int, int]:
    if spec.color_mode == "random":
        return tuple(int(v) for v in rng.integers(60, 240, size=3))
    base = _BASE_COLORS.get(kind) or _EXTRA_COLORS[class_index % len(_EXTRA_COLORS)]
    jitter = rng.integers(-spec.color_jitter, spec.color_jitter + 1, size=3)
    return tuple(int(np.clip(b + j, 0, 255)) for b, j in zip(base, jitter))


def generate_shapes_dataset(spec: ShapesSpec, out_dir: str | Path,
                            seed: int) -> DatasetSplit:
    """Render a shapes dataset to disk and return it as a loaded split.

    Writes ``out_dir/images/*.png`` and ``out_dir/annotations.json`` (COCO
    format plus a "splits" key). Byte-identical annotations per seed.
    """
    spec.validate()
    rng = np.random.default_rng(seed)
    out_dir = Path(out_dir)
    images_dir = out_dir / "images"
    images_dir.mkdir(parents=True, exist_ok=True)

    size = spec.image_size
    categories = [{"id": i + 1, "name": name} for i, name in enumerate(spec.classes)]
    cat_id = {name: i + 1 for i, name in enumerate(spec.classes)}
    images_json, annotations_json = [], []
    ann_id = 1
    for image_id in range(1, spec.images + 1):
        background = np.full((size, size, 3), 46, dtype=np.uint8)
        if spec.background_noise > 0:
            noise = rng.integers(-spec.background_noise, spec.background_noise + 1,
                                 size=background.shape)
            background = np.clip(background.astype(np.int16) + noise, 0, 255).astype(np.uint8)
        img = Image.fromarray(background)
        draw = ImageDraw.Draw(img)

        placed: list[Box] = []
        n_instances = int(rng.integers(spec.min_instances, spec.max_instances + 1))
        for _ in range(n_instances):
            class_index = int(rng.integers(0, len(spec.classes)))
            kind = spec.classes[class_index]
            for _attempt in range(12):
                w = int(rng.integers(spec.min_size, spec.max_size + 1))
                h = int(np.clip(round(w * rng.uniform(0.8, 1.25)), spec.min_size, spec.max_size))
                x1 = int(rng.integers(1, size - w))
                y1 = int(rng.integers(1, size - h))
                candidate = Box(x1, y1, x1 + w, y1 + h)
                from .geometry import iou as box_iou
                if all(box_iou(candidate, p) <= spec.max_placement_iou for p in placed):
                    color = _instance_color(kind, class_index, spec, rng)
                    gt = _draw_shape(draw, kind, x1, y1, x1 + w, y1 + h, color)
                    placed.append(gt)
                    annotations_json.append({
                        "id": ann_id, "image_id": image_id,
                        "category_id": cat_id[kind],
                        "bbox": [gt.x1, gt.y1, gt.width, gt.height],
                        "area": gt.area, "iscrowd": 0,
                    })
                    ann_id += 1
                    break

        file_name = f"{image_id:06d}.png"
        img.save(images_dir / file_name)
        images_json.append({"id": image_id, "file_name": file_name,
                            "width": size, "height": size})

    payload = {
        "images": images_json,
        "annotations": annotations_json,
        "categories": categories,
        "splits": {
            "base": [cat_id[c] for c in spec.classes if c not in spec.novel_classes],
            "novel": [cat_id[c] for c in spec.novel_classes],
        },
    }
    ann_path = out_dir / "annotations.json"
    ann_path.write_text(json.dumps(payload, sort_keys=True, separators=(",", ":")))
    return load_coco_annotations(ann_path, visible="all")
