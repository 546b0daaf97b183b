"""COCO detection/segmentation annotation files: load, validate, index, save."""

from __future__ import annotations

import enum
import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np

from smallaug import masks

logger = logging.getLogger(__name__)

SMALL_MAX = 32 * 32
MEDIUM_MAX = 96 * 96


class DatasetError(ValueError):
    """Base class for annotation-file problems."""


class MalformedJson(DatasetError):
    def __init__(self, path, pos: int, msg: str):
        super().__init__(f"{path}: malformed JSON at byte offset {pos}: {msg}")
        self.pos = pos


class MissingField(DatasetError):
    def __init__(self, name: str, where: str):
        super().__init__(f"missing field {name!r} in {where}")
        self.name = name


class DanglingReference(DatasetError):
    def __init__(self, ann_id, field_name: str, value):
        super().__init__(f"annotation {ann_id}: {field_name}={value} does not exist")
        self.annotation_id = ann_id


class DuplicateId(DatasetError):
    pass


class InvalidRecord(DatasetError):
    pass


class SizeClass(enum.Enum):
    SMALL = "small"
    MEDIUM = "medium"
    LARGE = "large"


SIZE_CLASSES = (SizeClass.SMALL, SizeClass.MEDIUM, SizeClass.LARGE)


class SizeBasis(enum.Enum):
    MASK = "mask"  # the annotation's ``area`` field
    BBOX = "bbox"  # w * h of the box


@dataclass(frozen=True)
class PolygonSet:
    polygons: tuple[tuple[float, ...], ...]

    def to_json(self):
        return [list(p) for p in self.polygons]


@dataclass(frozen=True)
class CompressedRLE:
    rle: masks.RunLengthCounts
    # whether ``counts`` was the char-compressed string on disk
    as_string: bool = True

    @property
    def size(self):
        return self.rle.size

    def to_json(self):
        h, w = self.rle.size
        counts = self.rle.to_string() if self.as_string else list(self.rle.counts)
        return {"size": [h, w], "counts": counts}


Segmentation = PolygonSet | CompressedRLE


@dataclass(frozen=True)
class ImageRecord:
    id: int
    width: int
    height: int
    file_name: str
    extra: dict = field(default_factory=dict, compare=True, hash=False)

    def to_json(self):
        out = dict(self.extra)
        out.update(id=self.id, width=self.width, height=self.height, file_name=self.file_name)
        return out


@dataclass(frozen=True)
class AnnotationRecord:
    id: int
    image_id: int
    category_id: int
    bbox: tuple[float, float, float, float]
    area: float
    segmentation: Segmentation | None
    iscrowd: bool = False
    extra: dict = field(default_factory=dict, compare=True, hash=False)

    def to_json(self):
        out = dict(self.extra)
        out.update(
            id=self.id,
            image_id=self.image_id,
            category_id=self.category_id,
            bbox=list(self.bbox),
            area=self.area,
            iscrowd=int(self.iscrowd),
        )
        if self.segmentation is not None:
            out["segmentation"] = self.segmentation.to_json()
        return out


@dataclass(frozen=True)
class Category:
    id: int
    name: str
    extra: dict = field(default_factory=dict, compare=True, hash=False)

    def to_json(self):
        out = dict(self.extra)
        out.update(id=self.id, name=self.name)
        return out


@dataclass(frozen=True, eq=False)
class Dataset:
    """An indexed, read-only COCO dataset.

    Records keep unknown JSON keys in ``extra`` so that saving reproduces
    the input. ``header`` holds top-level keys other than the three lists.
    """

    images: tuple[ImageRecord, ...]
    annotations: tuple[AnnotationRecord, ...]
    categories: tuple[Category, ...]
    header: dict = field(default_factory=dict)

    def __post_init__(self):
        image_by_id = {}
        for img in self.images:
            if img.id in image_by_id:
                raise DuplicateId(f"duplicate image id {img.id}")
            if img.width <= 0 or img.height <= 0:
                raise InvalidRecord(f"image {img.id}: non-positive size {img.width}x{img.height}")
            image_by_id[img.id] = img
        cat_ids = set()
        for cat in self.categories:
            if cat.id in cat_ids:
                raise DuplicateId(f"duplicate category id {cat.id}")
            cat_ids.add(cat.id)
        by_image: dict[int, list[AnnotationRecord]] = {i: [] for i in image_by_id}
        ann_ids = set()
        for ann in self.annotations:
            if ann.id in ann_ids:
                raise DuplicateId(f"duplicate annotation id {ann.id}")
            ann_ids.add(ann.id)
            if ann.image_id not in image_by_id:
                raise DanglingReference(ann.id, "image_id", ann.image_id)
            if ann.category_id not in cat_ids:
                raise DanglingReference(ann.id, "category_id", ann.category_id)
            by_image[ann.image_id].append(ann)
        object.__setattr__(self, "_image_by_id", image_by_id)
        object.__setattr__(self, "_by_image", {k: tuple(v) for k, v in by_image.items()})

    def image(self, image_id: int) -> ImageRecord:
        return self._image_by_id[image_id]

    def annotations_for(self, image_id: int) -> tuple[AnnotationRecord, ...]:
        return self._by_image[image_id]

    @property
    def max_image_id(self) -> int:
        return max((i.id for i in self.images), default=0)

    @property
    def max_annotation_id(self) -> int:
        return max((a.id for a in self.annotations), default=0)

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            self.images == other.images
            and self.annotations == other.annotations
            and self.categories == other.categories
            and self.header == other.header
        )

    def to_json(self) -> dict:
        out = dict(self.header)
        out["images"] = [i.to_json() for i in self.images]
        out["annotations"] = [a.to_json() for a in self.annotations]
        out["categories"] = [c.to_json() for c in self.categories]
        return out


def _require(obj: dict, name: str, where: str):
    try:
        return obj[name]
    except KeyError:
        raise MissingField(name, where) from None
    except TypeError:
        raise InvalidRecord(f"{where} is not a JSON object") from None


def parse_segmentation(raw, where: str) -> Segmentation | None:
    if raw is None:
        return None
    if isinstance(raw, list):
        polys = []
        for poly in raw:
            if not isinstance(poly, list):
                raise InvalidRecord(f"{where}: polygon is not a list")
            if len(poly) < 6 or len(poly) % 2:
                raise InvalidRecord(f"{where}: polygon with {len(poly)} coordinates")
            if not all(math.isfinite(v) for v in poly):
                raise InvalidRecord(f"{where}: non-finite polygon coordinate")
            polys.append(tuple(poly))
        return PolygonSet(tuple(polys))
    if isinstance(raw, dict):
        size = _require(raw, "size", where + ".segmentation")
        counts = _require(raw, "counts", where + ".segmentation")
        try:
            if isinstance(counts, str):
                rle = masks.RunLengthCounts.from_string(size, counts)
                return CompressedRLE(rle, as_string=True)
            rle = masks.RunLengthCounts((int(size[0]), int(size[1])), tuple(int(c) for c in counts))
        except masks.MaskError as exc:
            raise InvalidRecord(f"{where}: {exc}") from None
        return CompressedRLE(rle, as_string=False)
    raise InvalidRecord(f"{where}: unsupported segmentation type {type(raw).__name__}")


def _clamp_bbox(ann_id, bbox, img: ImageRecord):
    try:
        x, y, w, h = (float(v) for v in bbox)
    except (TypeError, ValueError):
        raise InvalidRecord(f"annotation {ann_id}: bbox must be four numbers") from None
    x0 = min(max(x, 0.0), img.width)
    y0 = min(max(y, 0.0), img.height)
    x1 = min(max(x + w, 0.0), img.width)
    y1 = min(max(y + h, 0.0), img.height)
    cw, ch = x1 - x0, y1 - y0
    if cw <= 0 or ch <= 0:
        raise InvalidRecord(f"annotation {ann_id}: bbox {list(bbox)} is empty inside image {img.id}")
    if (x0, y0, cw, ch) == (x, y, w, h):
        return tuple(bbox), False
    return (x0, y0, cw, ch), True


_IMAGE_KEYS = {"id", "width", "height", "file_name"}
_ANN_KEYS = {"id", "image_id", "category_id", "bbox", "area", "segmentation", "iscrowd"}
_CAT_KEYS = {"id", "name"}


def dataset_from_json(data: Any, source: str = "<memory>", drop_invalid: bool = False) -> Dataset:
    """Build a validated :class:`Dataset` from a parsed COCO document.

    Out-of-image boxes are clamped with a warning. Annotations that stay
    invalid raise :class:`InvalidRecord`, or are dropped with a warning when
    ``drop_invalid`` is set.
    """
    if not isinstance(data, dict):
        raise InvalidRecord(f"{source}: top level is not a JSON object")
    raw_images = _require(data, "images", source)
    raw_anns = _require(data, "annotations", source)
    raw_cats = _require(data, "categories", source)
    header = {k: v for k, v in data.items() if k not in ("images", "annotations", "categories")}

    images = []
    for n, raw in enumerate(raw_images):
        where = f"images[{n}]"
        images.append(
            ImageRecord(
                id=_require(raw, "id", where),
                width=_require(raw, "width", where),
                height=_require(raw, "height", where),
                file_name=_require(raw, "file_name", where),
                extra={k: v for k, v in raw.items() if k not in _IMAGE_KEYS},
            )
        )
    image_by_id = {img.id: img for img in images}

    categories = []
    for n, raw in enumerate(raw_cats):
        where = f"categories[{n}]"
        categories.append(
            Category(
                id=_require(raw, "id", where),
                name=_require(raw, "name", where),
                extra={k: v for k, v in raw.items() if k not in _CAT_KEYS},
            )
        )

    annotations = []
    clamped = 0
    for n, raw in enumerate(raw_anns):
        where = f"annotations[{n}]"
        ann_id = _require(raw, "id", where)
        where = f"annotation {ann_id}"
        image_id = _require(raw, "image_id", where)
        category_id = _require(raw, "category_id", where)
        img = image_by_id.get(image_id)
        if img is None:
            raise DanglingReference(ann_id, "image_id", image_id)
        try:
            bbox, was_clamped = _clamp_bbox(ann_id, _require(raw, "bbox", where), img)
            area = _require(raw, "area", where)
            if not (isinstance(area, (int, float)) and area > 0):
                raise InvalidRecord(f"{where}: area must be positive, got {area!r}")
            seg = parse_segmentation(raw.get("segmentation"), where)
        except InvalidRecord as exc:
            if not drop_invalid:
                raise
            logger.warning("dropping %s", exc)
            continue
        clamped += was_clamped
        annotations.append(
            AnnotationRecord(
                id=ann_id,
                image_id=image_id,
                category_id=category_id,
                bbox=bbox,
                area=area,
                segmentation=seg,
                iscrowd=bool(raw.get("iscrowd", 0)),
                extra={k: v for k, v in raw.items() if k not in _ANN_KEYS},
            )
        )
    if clamped:
        logger.warning("%s: clamped %d bounding boxes to image bounds", source, clamped)
    return Dataset(tuple(images), tuple(annotations), tuple(categories), header)


def load_dataset(path, drop_invalid: bool = False) -> Dataset:
    path = Path(path)
    raw = path.read_bytes()
    try:
        data = json.loads(raw.decode("utf-8"))
    except UnicodeDecodeError as exc:
        raise MalformedJson(path, exc.start, "not UTF-8") from None
    except json.JSONDecodeError as exc:
        # exc.pos is a character offset; report bytes
        pos = len(exc.doc[: exc.pos].encode("utf-8"))
        raise MalformedJson(path, pos, exc.msg) from None
    return dataset_from_json(data, str(path), drop_invalid=drop_invalid)


def dumps_dataset(d: Dataset) -> str:
    return json.dumps(d.to_json(), separators=(",", ":"))


def save_dataset(d: Dataset, path) -> None:
    """Write ``d`` as compact JSON. Raises OSError when the path is not writable."""
    Path(path).write_text(dumps_dataset(d), encoding="utf-8")


def object_area(ann: AnnotationRecord, basis: SizeBasis = SizeBasis.MASK) -> float:
    if basis is SizeBasis.MASK:
        return float(ann.area)
    return float(ann.bbox[2]) * float(ann.bbox[3])


def classify_area(area: float) -> SizeClass:
    if area < SMALL_MAX:
        return SizeClass.SMALL
    if area < MEDIUM_MAX:
        return SizeClass.MEDIUM
    return SizeClass.LARGE


def classify_size(ann: AnnotationRecord, basis: SizeBasis = SizeBasis.MASK) -> SizeClass:
    return classify_area(object_area(ann, basis))


def annotation_mask(ann: AnnotationRecord, img: ImageRecord) -> np.ndarray:
    """Binary mask of an annotation in its image frame.

    Falls back to the (rounded-out) bounding box when no segmentation exists.
    """
    seg = ann.segmentation
    if isinstance(seg, PolygonSet):
        return masks.rasterize_polygons(seg.polygons, img.width, img.height)
    if isinstance(seg, CompressedRLE):
        m = masks.rle_decode(seg.rle)
        if m.shape != (img.height, img.width):
            out = masks.empty_mask(img.width, img.height)
            h = min(m.shape[0], img.height)
            w = min(m.shape[1], img.width)
            out[:h, :w] = m[:h, :w]
            return out
        return m
    out = masks.empty_mask(img.width, img.height)
    x, y, w, h = ann.bbox
    out[int(math.floor(y)):int(math.ceil(y + h)), int(math.floor(x)):int(math.ceil(x + w))] = 1
    return out


@dataclass
class ValidationIssue:
    level: str  # "error" or "warning"
    record: str
    message: str

    def __str__(self):
        return f"{self.level}: {self.record}: {self.message}"


def validate_dataset(
    d: Dataset, recompute_area: bool = False, tolerance: float = 0.01
) -> list[ValidationIssue]:
    """Checks beyond what loading already enforces.

    With ``recompute_area`` each mask is rasterized and a warning is emitted
    when the stored ``area`` differs from the pixel count by more than
    ``tolerance`` (relative). Nothing is rewritten.
    """
    issues = []
    for ann in d.annotations:
        img = d.image(ann.image_id)
        x, y, w, h = ann.bbox
        tag = f"annotation {ann.id}"
        if x < 0 or y < 0 or x + w > img.width + 1e-6 or y + h > img.height + 1e-6:
            issues.append(ValidationIssue("error", tag, f"bbox {list(ann.bbox)} outside image {img.id}"))
        if w <= 0 or h <= 0 or ann.area <= 0:
            issues.append(ValidationIssue("error", tag, "non-positive bbox size or area"))
        seg = ann.segmentation
        if isinstance(seg, PolygonSet):
            for poly in seg.polygons:
                if any(v < 0 for v in poly):
                    issues.append(ValidationIssue("warning", tag, "negative polygon coordinate"))
                    break
        elif isinstance(seg, CompressedRLE) and tuple(seg.size) != (img.height, img.width):
            issues.append(ValidationIssue("error", tag, f"RLE size {list(seg.size)} != image size"))
        if recompute_area and seg is not None:
            actual = masks.mask_area(annotation_mask(ann, img))
            if ann.area > 0 and abs(actual - ann.area) > tolerance * ann.area:
                issues.append(
                    ValidationIssue("warning", tag, f"area {ann.area} vs mask pixel count {actual}")
                )
    return issues


def with_annotations(d: Dataset, annotations: Iterable[AnnotationRecord]) -> Dataset:
    return Dataset(d.images, tuple(annotations), d.categories, d.header)


def renumber(ann: AnnotationRecord, **changes) -> AnnotationRecord:
    return replace(ann, **changes)


def size_class_counts(anns: Sequence[AnnotationRecord], basis: SizeBasis = SizeBasis.MASK) -> dict:
    counts = {c.value: 0 for c in SIZE_CLASSES}
    for a in anns:
        counts[classify_size(a, basis).value] += 1
    return counts
