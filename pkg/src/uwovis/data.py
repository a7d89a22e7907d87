"""COCO-style annotation ingestion, class-split construction, task
configuration, and deterministic synthetic fixtures.

Annotation files carry images / annotations / categories arrays; masks are
polygons (decoded with a pixel-center even-odd rule) or uncompressed
column-major run-length counts. Writers are canonical (sorted keys, fixed
indentation) so load -> save round-trips byte-identically.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from importlib import resources as importlib_resources
from pathlib import Path

import numpy as np
from PIL import Image

from .encoders import ImageSample
from .kernels import rle_decode, rle_encode

Array = np.ndarray

ANNOTATION_FORMAT = "uwovis-annotations-v1"


class DataError(ValueError):
    """Malformed or inconsistent dataset input."""


class AnnotationError(DataError):
    """A specific annotation record is invalid; message carries its id."""


class PlacementError(DataError):
    """Synthetic scene generation could not place all requested shapes."""


class TaskConfigError(DataError):
    """Inconsistent task configuration."""


def _dump_canonical(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, ensure_ascii=False) + "\n"


# -- mask codecs --------------------------------------------------------------


def polygon_to_mask(polygons: list[list[float]], height: int, width: int) -> Array:
    """Rasterize polygon rings with the even-odd rule at pixel centers.

    Multiple rings are OR-ed together (each ring rasterized independently).
    """
    mask = np.zeros((height, width), dtype=np.uint8)
    cx = np.arange(width) + 0.5
    cy = np.arange(height) + 0.5
    px = cx[None, :]
    py = cy[:, None]
    for ring in polygons:
        if len(ring) < 6 or len(ring) % 2 != 0:
            raise DataError(f"polygon ring needs >= 3 (x, y) pairs, got {len(ring)} values")
        xs = np.asarray(ring[0::2], dtype=np.float64)
        ys = np.asarray(ring[1::2], dtype=np.float64)
        inside = np.zeros((height, width), dtype=bool)
        n = len(xs)
        for i in range(n):
            x1, y1 = xs[i], ys[i]
            x2, y2 = xs[(i + 1) % n], ys[(i + 1) % n]
            if y1 == y2:
                continue
            crosses = (y1 > py) != (y2 > py)
            with np.errstate(invalid="ignore"):
                x_at = x1 + (py - y1) * (x2 - x1) / (y2 - y1)
            inside ^= crosses & (px < x_at)
        mask |= inside.astype(np.uint8)
    return mask


def mask_to_rle(mask: Array) -> dict:
    mask = np.asarray(mask)
    return {
        "size": [int(mask.shape[0]), int(mask.shape[1])],
        "counts": [int(c) for c in rle_encode(mask)],
    }


def rle_to_mask(rle: dict) -> Array:
    h, w = rle["size"]
    return rle_decode(np.asarray(rle["counts"], dtype=np.int64), int(h), int(w))


def mask_to_bbox(mask: Array) -> list[float]:
    ys, xs = np.nonzero(mask)
    if ys.size == 0:
        return [0.0, 0.0, 0.0, 0.0]
    return [
        float(xs.min()),
        float(ys.min()),
        float(xs.max() - xs.min() + 1),
        float(ys.max() - ys.min() + 1),
    ]


# -- dataset index -------------------------------------------------------------


@dataclass
class ImageRecord:
    id: int
    file_name: str
    height: int
    width: int


@dataclass
class AnnotationRecord:
    id: int
    image_id: int
    category_id: int
    segmentation: dict | list
    bbox: list[float]


@dataclass
class CategoryRecord:
    id: int
    name: str
    supercategory: str


class DatasetIndex:
    """Validated view over a COCO-style annotation file."""

    def __init__(
        self,
        images: dict[int, ImageRecord],
        annotations: dict[int, AnnotationRecord],
        categories: dict[int, CategoryRecord],
        root: Path | None = None,
    ):
        self.images = images
        self.annotations = annotations
        self.categories = categories
        self.root = Path(root) if root is not None else None
        self._validate()

    def _validate(self) -> None:
        names = [c.name for c in self.categories.values()]
        if len(names) != len(set(names)):
            raise DataError("duplicate category names in index")
        for ann in self.annotations.values():
            if ann.image_id not in self.images:
                raise AnnotationError(
                    f"annotation {ann.id} references missing image id {ann.image_id}"
                )
            if ann.category_id not in self.categories:
                raise AnnotationError(
                    f"annotation {ann.id} references missing category id {ann.category_id}"
                )
            img = self.images[ann.image_id]
            if isinstance(ann.segmentation, dict):
                h, w = ann.segmentation.get("size", (None, None))
                if (h, w) != (img.height, img.width):
                    raise AnnotationError(
                        f"annotation {ann.id} mask size {h}x{w} != image "
                        f"{img.height}x{img.width}"
                    )

    # -- lookups --

    def category_names(self) -> list[str]:
        return [self.categories[cid].name for cid in sorted(self.categories)]

    def category_id_by_name(self, name: str) -> int:
        for cid, cat in self.categories.items():
            if cat.name == name:
                return cid
        raise DataError(f"unknown category name {name!r}")

    def annotations_for_image(self, image_id: int) -> list[AnnotationRecord]:
        return sorted(
            (a for a in self.annotations.values() if a.image_id == image_id),
            key=lambda a: a.id,
        )

    def image_ids_for_category(self, name: str) -> list[int]:
        try:
            cid = self.category_id_by_name(name)
        except DataError:
            return []
        return sorted({a.image_id for a in self.annotations.values() if a.category_id == cid})

    def decode_mask(self, annotation_id: int) -> Array:
        ann = self.annotations[annotation_id]
        img = self.images[ann.image_id]
        if isinstance(ann.segmentation, dict):
            mask = rle_to_mask(ann.segmentation)
        else:
            try:
                mask = polygon_to_mask(ann.segmentation, img.height, img.width)
            except DataError as exc:
                raise AnnotationError(f"annotation {ann.id}: {exc}") from exc
        if mask.shape != (img.height, img.width):
            raise AnnotationError(
                f"annotation {ann.id} decodes to {mask.shape}, image is "
                f"{(img.height, img.width)}"
            )
        return mask

    def load_image(self, image_id: int) -> ImageSample:
        if self.root is None:
            raise DataError("dataset index has no image root directory")
        rec = self.images[image_id]
        with Image.open(self.root / rec.file_name) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
        return ImageSample(pixels=arr, id=str(image_id))

    # -- serialization --

    def to_dict(self) -> dict:
        return {
            "format": ANNOTATION_FORMAT,
            "images": [
                {
                    "id": r.id,
                    "file_name": r.file_name,
                    "height": r.height,
                    "width": r.width,
                }
                for r in sorted(self.images.values(), key=lambda r: r.id)
            ],
            "annotations": [
                {
                    "id": a.id,
                    "image_id": a.image_id,
                    "category_id": a.category_id,
                    "segmentation": a.segmentation,
                    "bbox": a.bbox,
                }
                for a in sorted(self.annotations.values(), key=lambda a: a.id)
            ],
            "categories": [
                {"id": c.id, "name": c.name, "supercategory": c.supercategory}
                for c in sorted(self.categories.values(), key=lambda c: c.id)
            ],
        }

    def save(self, path: str | Path) -> None:
        Path(path).write_text(_dump_canonical(self.to_dict()), encoding="utf-8")


def load_annotations(path: str | Path, root: str | Path | None = None) -> DatasetIndex:
    """Parse and validate an annotation file; image files live under ``root``
    (defaults to the annotation file's directory)."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"annotation file not found: {path}")
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DataError(f"annotation file {path} is not valid JSON: {exc}") from exc
    for key in ("images", "annotations", "categories"):
        if key not in raw:
            raise DataError(f"annotation file {path} lacks the {key!r} array")
    images = {}
    for rec in raw["images"]:
        images[int(rec["id"])] = ImageRecord(
            id=int(rec["id"]),
            file_name=str(rec["file_name"]),
            height=int(rec["height"]),
            width=int(rec["width"]),
        )
    annotations = {}
    for rec in raw["annotations"]:
        annotations[int(rec["id"])] = AnnotationRecord(
            id=int(rec["id"]),
            image_id=int(rec["image_id"]),
            category_id=int(rec["category_id"]),
            segmentation=rec["segmentation"],
            bbox=[float(v) for v in rec.get("bbox", [0, 0, 0, 0])],
        )
    categories = {}
    for rec in raw["categories"]:
        categories[int(rec["id"])] = CategoryRecord(
            id=int(rec["id"]),
            name=str(rec["name"]),
            supercategory=str(rec.get("supercategory", "")),
        )
    return DatasetIndex(
        images, annotations, categories, root=root if root is not None else path.parent
    )


# -- class splits ---------------------------------------------------------------


@dataclass
class ClassSplit:
    """Named three-way partition of category names."""

    train_exclusive: list[str]
    intersection: list[str]
    ov_exclusive: list[str]

    def __post_init__(self):
        a, b, c = map(set, (self.train_exclusive, self.intersection, self.ov_exclusive))
        if a & b or a & c or b & c:
            raise DataError("class split groups must be pairwise disjoint")
        self.train_exclusive = sorted(self.train_exclusive)
        self.intersection = sorted(self.intersection)
        self.ov_exclusive = sorted(self.ov_exclusive)

    @property
    def train_classes(self) -> list[str]:
        return sorted(set(self.train_exclusive) | set(self.intersection))

    @property
    def val_classes(self) -> list[str]:
        return sorted(set(self.intersection) | set(self.ov_exclusive))

    def to_dict(self) -> dict:
        return {
            "train_exclusive": self.train_exclusive,
            "intersection": self.intersection,
            "ov_exclusive": self.ov_exclusive,
        }

    def save(self, path: str | Path) -> None:
        Path(path).write_text(_dump_canonical(self.to_dict()), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "ClassSplit":
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
        return cls(
            train_exclusive=list(raw["train_exclusive"]),
            intersection=list(raw["intersection"]),
            ov_exclusive=list(raw["ov_exclusive"]),
        )


def build_class_split(train_index: DatasetIndex, val_index: DatasetIndex) -> ClassSplit:
    """Partition category names by presence in the two indices."""
    train_names = set(train_index.category_names())
    val_names = set(val_index.category_names())
    return ClassSplit(
        train_exclusive=sorted(train_names - val_names),
        intersection=sorted(train_names & val_names),
        ov_exclusive=sorted(val_names - train_names),
    )


def split_from_names(train_names: list[str], val_names: list[str]) -> ClassSplit:
    tn, vn = set(train_names), set(val_names)
    return ClassSplit(
        train_exclusive=sorted(tn - vn),
        intersection=sorted(tn & vn),
        ov_exclusive=sorted(vn - tn),
    )


@dataclass
class TaskConfig:
    mode: str  # in-domain | cross-domain
    train_source: str
    eval_source: str
    vocabulary: list[str]


def make_task_config(mode: str, sources: tuple[str, str], split: ClassSplit) -> TaskConfig:
    """Resolve the inference vocabulary for the requested evaluation mode."""
    if mode not in ("in-domain", "cross-domain"):
        raise TaskConfigError(f"unknown task mode {mode!r}")
    if mode == "cross-domain" and split.intersection:
        raise TaskConfigError(
            "cross-domain mode requires disjoint category sets; shared: "
            + ", ".join(split.intersection[:5])
        )
    return TaskConfig(
        mode=mode,
        train_source=sources[0],
        eval_source=sources[1],
        vocabulary=split.val_classes,
    )


# -- bundled marine vocabulary -----------------------------------------------


def load_marine_vocabulary() -> list[dict]:
    """The bundled fine-grained marine class list (name, supercategory,
    split membership)."""
    text = (
        importlib_resources.files("uwovis.resources")
        .joinpath("marine_vocabulary.json")
        .read_text(encoding="utf-8")
    )
    return json.loads(text)


def marine_class_split() -> ClassSplit:
    entries = load_marine_vocabulary()
    return ClassSplit(
        train_exclusive=[e["name"] for e in entries if e["split"] == "train_exclusive"],
        intersection=[e["name"] for e in entries if e["split"] == "intersection"],
        ov_exclusive=[e["name"] for e in entries if e["split"] == "ov_exclusive"],
    )


# -- synthetic fixtures ---------------------------------------------------------

_SHAPE_KINDS = ("disc", "box", "wedge")
_COLOR_BUCKETS = (
    ("crimson", (0.85, 0.10, 0.15)),
    ("emerald", (0.10, 0.75, 0.25)),
    ("azure", (0.10, 0.35, 0.90)),
    ("amber", (0.95, 0.75, 0.10)),
    ("violet", (0.60, 0.15, 0.85)),
    ("teal", (0.05, 0.70, 0.70)),
)


@dataclass(frozen=True)
class FixtureSpec:
    n_images: int = 20
    n_classes: int = 6
    shapes_per_image: int = 2
    image_size: int = 64

    def __post_init__(self):
        if min(self.n_images, self.n_classes, self.shapes_per_image, self.image_size) <= 0:
            raise DataError("fixture spec fields must be positive")
        if self.n_classes > len(_SHAPE_KINDS) * len(_COLOR_BUCKETS):
            raise DataError(
                f"at most {len(_SHAPE_KINDS) * len(_COLOR_BUCKETS)} classes supported"
            )


def _class_pair(i: int) -> tuple[int, int]:
    """(color index, shape index) for class i; the first six classes get six
    distinct colors so small fixtures stay visually separable."""
    color = i % len(_COLOR_BUCKETS)
    shape = (i + i // len(_COLOR_BUCKETS)) % len(_SHAPE_KINDS)
    return color, shape


def fixture_class_names(n_classes: int) -> list[str]:
    names = []
    for i in range(n_classes):
        color, shape = _class_pair(i)
        names.append(f"{_COLOR_BUCKETS[color][0]} {_SHAPE_KINDS[shape]}")
    return names


def _shape_mask(kind: str, cy: float, cx: float, r: float, size: int) -> tuple[Array, dict | list]:
    """Exact mask plus its annotation geometry (RLE for discs, polygons
    otherwise)."""
    if kind == "disc":
        yy, xx = np.mgrid[0:size, 0:size]
        mask = (((yy + 0.5 - cy) ** 2 + (xx + 0.5 - cx) ** 2) <= r * r).astype(np.uint8)
        return mask, mask_to_rle(mask)
    if kind == "box":
        ring = [cx - r, cy - r, cx + r, cy - r, cx + r, cy + r, cx - r, cy + r]
    else:  # wedge: upward triangle
        ring = [cx, cy - r, cx + r, cy + r, cx - r, cy + r]
    ring = [round(float(v), 2) for v in ring]
    mask = polygon_to_mask([ring], size, size)
    return mask, [ring]


def _textured_background(rng: np.random.Generator, size: int) -> Array:
    coarse = rng.uniform(0.05, 0.30, (size // 8 + 1, size // 8 + 1, 3))
    img = np.kron(coarse, np.ones((8, 8, 1)))[:size, :size]
    img += rng.uniform(-0.02, 0.02, (size, size, 3))
    return np.clip(img, 0.0, 1.0)


def synth_fixture(seed: int, spec: FixtureSpec, out_dir: str | Path) -> DatasetIndex:
    """Render deterministic shape scenes and emit images + annotations.

    Each instance is one shape; its class is the (color bucket, shape kind)
    pair. Shapes never overlap, so annotation masks are exact.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    size = spec.image_size
    class_names = fixture_class_names(spec.n_classes)

    images: dict[int, ImageRecord] = {}
    annotations: dict[int, AnnotationRecord] = {}
    categories = {
        i + 1: CategoryRecord(
            id=i + 1,
            name=name,
            supercategory=name.split()[-1],
        )
        for i, name in enumerate(class_names)
    }

    ann_id = 1
    for img_idx in range(spec.n_images):
        img = _textured_background(rng, size)
        occupied = np.zeros((size, size), dtype=np.uint8)
        for j in range(spec.shapes_per_image):
            class_idx = (img_idx * spec.shapes_per_image + j) % spec.n_classes
            color_idx, shape_idx = _class_pair(class_idx)
            kind = _SHAPE_KINDS[shape_idx]
            color = np.asarray(_COLOR_BUCKETS[color_idx][1])
            placed = False
            for _ in range(200):
                r = rng.uniform(0.14, 0.21) * size
                cy = rng.uniform(r + 1, size - r - 1)
                cx = rng.uniform(r + 1, size - r - 1)
                mask, geom = _shape_mask(kind, cy, cx, r, size)
                if mask.sum() == 0 or (mask & occupied).any():
                    continue
                shade = rng.uniform(0.85, 1.0)
                img[mask == 1] = np.clip(color * shade, 0.0, 1.0)
                occupied |= mask
                annotations[ann_id] = AnnotationRecord(
                    id=ann_id,
                    image_id=img_idx + 1,
                    category_id=class_idx + 1,
                    segmentation=geom,
                    bbox=mask_to_bbox(mask),
                )
                ann_id += 1
                placed = True
                break
            if not placed:
                raise PlacementError(
                    f"could not place shape {j} in image {img_idx} "
                    f"({spec.shapes_per_image} shapes on a {size}px canvas)"
                )
        file_name = f"img_{img_idx + 1:05d}.png"
        Image.fromarray((img * 255.0 + 0.5).astype(np.uint8)).save(out_dir / file_name)
        images[img_idx + 1] = ImageRecord(
            id=img_idx + 1, file_name=file_name, height=size, width=size
        )

    index = DatasetIndex(images, annotations, categories, root=out_dir)
    index.save(out_dir / "annotations.json")
    return index
