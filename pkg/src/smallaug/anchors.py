"""FPN-style anchors, RPN positive matching and the per-size-class anchor report."""

from __future__ import annotations

import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from smallaug import coco
from smallaug._backend import BACKEND, kernels
from smallaug._pykernels import _grid_anchors, _iou_matrix
from smallaug.coco import SIZE_CLASSES, SizeBasis, SizeClass

REPORT_SCHEMA_VERSION = 1


class EmptyDataset(ValueError):
    pass


@dataclass(frozen=True)
class AnchorConfig:
    strides: tuple[float, ...] = (4, 8, 16, 32, 64)
    base_sizes: tuple[float, ...] = (32, 64, 128, 256, 512)
    aspect_ratios: tuple[float, ...] = (1.0, 0.5, 2.0)  # h / w
    positive_iou: float = 0.7
    force_argmax: bool = True
    # anchors extending more than this many pixels past the border are ignored;
    # None keeps every anchor
    straddle: float | None = None
    # optional (short side, long side cap) resize applied to image and boxes first
    resize: tuple[int, int] | None = None

    def __post_init__(self):
        if len(self.strides) != len(self.base_sizes) or not self.strides:
            raise ValueError("strides and base_sizes must be non-empty and of equal length")
        if list(self.strides) != sorted(self.strides) or list(self.base_sizes) != sorted(self.base_sizes):
            raise ValueError("strides and base sizes must be ascending")
        if any(s <= 0 for s in self.strides) or any(b <= 0 for b in self.base_sizes):
            raise ValueError("strides and base sizes must be positive")
        if not self.aspect_ratios or any(r <= 0 for r in self.aspect_ratios):
            raise ValueError("aspect ratios must be positive")
        if not 0 < self.positive_iou <= 1:
            raise ValueError("positive_iou must be in (0, 1]")

    def anchor_dims(self):
        """(L, R) arrays of anchor widths and heights; area is base_size**2 up to rounding."""
        base = np.asarray(self.base_sizes, dtype=np.float64)[:, None]
        ratios = np.asarray(self.aspect_ratios, dtype=np.float64)[None, :]
        return base * np.sqrt(1.0 / ratios), base * np.sqrt(ratios)

    def resize_factor(self, width: float, height: float) -> float:
        if self.resize is None:
            return 1.0
        short, long_cap = self.resize
        f = short / min(width, height)
        if max(width, height) * f > long_cap:
            f = long_cap / max(width, height)
        return f


@dataclass(frozen=True)
class Anchors:
    """Anchor boxes as an (N, 4) xywh array with the pyramid level of each row.

    Ordering is level, then grid row, then grid column, then aspect ratio.
    """

    boxes: np.ndarray
    levels: np.ndarray

    def __len__(self):
        return len(self.boxes)


@dataclass(frozen=True)
class ObjectMatchStats:
    annotation_id: int
    size_class: SizeClass
    matched_anchor_count: int
    max_iou: float


def generate_anchors(width: float, height: float, cfg: AnchorConfig = AnchorConfig()) -> Anchors:
    if width <= 0 or height <= 0:
        raise ValueError("image dimensions must be positive")
    aw, ah = cfg.anchor_dims()
    boxes = _grid_anchors(width, height, np.asarray(cfg.strides, dtype=np.float64), aw, ah)
    per_level = [
        math.ceil(width / s) * math.ceil(height / s) * len(cfg.aspect_ratios) for s in cfg.strides
    ]
    levels = np.repeat(np.arange(len(cfg.strides), dtype=np.int64), per_level)
    return Anchors(boxes, levels)


def anchor_count(width: float, height: float, cfg: AnchorConfig = AnchorConfig()) -> int:
    return sum(math.ceil(width / s) * math.ceil(height / s) for s in cfg.strides) * len(cfg.aspect_ratios)


def box_iou(a: Sequence[float], b: Sequence[float]) -> float:
    """IoU of two xywh boxes on continuous coordinates; 0 when the union is empty."""
    ax, ay, aw, ah = (float(v) for v in a)
    bx, by, bw, bh = (float(v) for v in b)
    iw = min(ax + aw, bx + bw) - max(ax, bx)
    ih = min(ay + ah, by + bh) - max(ay, by)
    inter = iw * ih if iw > 0 and ih > 0 else 0.0
    union = aw * ah + bw * bh - inter
    return inter / union if union > 0 else 0.0


def iou_matrix(boxes: np.ndarray, gts: np.ndarray) -> np.ndarray:
    """(N, M) IoU between N anchor boxes and M ground-truth boxes, all xywh."""
    return _iou_matrix(np.asarray(boxes, dtype=np.float64).reshape(-1, 4),
                       np.asarray(gts, dtype=np.float64).reshape(-1, 4))


def _finalize(positive, max_iou, best, force_argmax):
    counts = positive.copy()
    if force_argmax:
        forced = (counts == 0) & (best >= 0)
        counts[forced] = 1
    return counts


def match_anchors(
    gts: Sequence[Sequence[float]],
    anchors: Anchors,
    cfg: AnchorConfig = AnchorConfig(),
    annotation_ids: Sequence[int] | None = None,
    size_classes: Sequence[SizeClass] | None = None,
) -> list[ObjectMatchStats]:
    """RPN positive assignment against an explicit anchor list.

    An anchor is positive for a gt when its IoU is strictly above the
    threshold; each such anchor counts once, toward its highest-IoU gt (ties go
    to the earlier gt). With ``force_argmax`` a gt left with no anchor gets its
    single best anchor.
    """
    if len(anchors) == 0:
        raise ValueError("no anchors")
    g = np.asarray(gts, dtype=np.float64).reshape(-1, 4)
    m = len(g)
    ids = list(annotation_ids) if annotation_ids is not None else list(range(m))
    classes = list(size_classes) if size_classes is not None else [
        coco.classify_area(w * h) for _, _, w, h in g
    ]
    if m == 0:
        return []
    iou = iou_matrix(anchors.boxes, g)
    max_iou = iou.max(axis=0)
    best = iou.argmax(axis=0)
    positive = np.zeros(m, dtype=np.int64)
    rows = np.flatnonzero((iou > cfg.positive_iou).any(axis=1))
    if rows.size:
        positive = np.bincount(iou[rows].argmax(axis=1), minlength=m)
    counts = _finalize(positive, max_iou, best, cfg.force_argmax)
    return [
        ObjectMatchStats(ids[k], classes[k], int(counts[k]), float(max_iou[k])) for k in range(m)
    ]


def match_image(
    gts: np.ndarray, width: float, height: float, cfg: AnchorConfig, kernel_module=None
):
    """Grid matching for one image; returns ``(counts, max_iou)`` per gt."""
    km = kernel_module if kernel_module is not None else kernels
    f = cfg.resize_factor(width, height)
    g = np.asarray(gts, dtype=np.float64).reshape(-1, 4)
    if f != 1.0:
        g = g * f
        width, height = round(width * f), round(height * f)
    aw, ah = cfg.anchor_dims()
    straddle = -1.0 if cfg.straddle is None else float(cfg.straddle)
    max_iou, best, positive = km.match_grid(
        g, float(width), float(height), np.asarray(cfg.strides, dtype=np.float64),
        aw, ah, float(cfg.positive_iou), straddle,
    )
    return _finalize(positive, max_iou, best, cfg.force_argmax), max_iou


@dataclass
class ClassStats:
    object_count: int = 0
    image_count: int = 0
    total_area: float = 0.0
    matched_anchors: int = 0
    matched_objects: int = 0  # non-crowd objects that went through matching
    sum_max_iou: float = 0.0
    object_count_pct: float = 0.0
    images_pct: float = 0.0
    total_area_pct: float = 0.0
    matched_anchors_pct: float = 0.0
    avg_matching_anchors: float = 0.0
    avg_max_iou: float = 0.0


@dataclass
class SizeClassStats:
    classes: dict[str, ClassStats]
    n_images: int
    n_objects: int
    config: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "schema_version": REPORT_SCHEMA_VERSION,
            "n_images": self.n_images,
            "n_objects": self.n_objects,
            "config": self.config,
            "classes": {k: asdict(v) for k, v in self.classes.items()},
        }

    def format_table(self) -> str:
        head = ("", "Object Count", "Images", "Total Object Area", "Matched Anchors",
                "Average matching anchors", "Average max IoU")
        rows = [head]
        for name, s in self.classes.items():
            rows.append((
                name,
                f"{s.object_count_pct:.2f}%",
                f"{s.images_pct:.2f}%",
                f"{s.total_area_pct:.2f}%",
                f"{s.matched_anchors_pct:.2f}%",
                f"{s.avg_matching_anchors:.2f}",
                f"{s.avg_max_iou:.2f}",
            ))
        widths = [max(len(r[i]) for r in rows) for i in range(len(head))]
        lines = []
        for n, r in enumerate(rows):
            lines.append("  ".join(c.rjust(widths[i]) if i else c.ljust(widths[i]) for i, c in enumerate(r)))
            if n == 0:
                lines.append("-" * len(lines[0]))
        return "\n".join(lines)


def _image_task(args):
    width, height, entries, cfg_dict, basis_value = args
    cfg = AnchorConfig(**cfg_dict)
    return _image_stats(width, height, entries, cfg, SizeBasis(basis_value))


def _image_stats(width, height, entries, cfg, basis):
    """entries: list of (bbox, area, iscrowd); returns per-object class, area, count, max_iou."""
    classes = []
    areas = []
    for bbox, area, _crowd in entries:
        a = area if basis is SizeBasis.MASK else bbox[2] * bbox[3]
        classes.append(SIZE_CLASSES.index(coco.classify_area(a)))
        areas.append(float(area))
    crowd = np.array([c for _, _, c in entries], dtype=bool)
    counts = np.zeros(len(entries), dtype=np.int64)
    max_iou = np.zeros(len(entries), dtype=np.float64)
    if (~crowd).any():
        g = np.array([b for (b, _, c) in entries if not c], dtype=np.float64).reshape(-1, 4)
        c, mi = match_image(g, width, height, cfg)
        counts[~crowd] = c
        max_iou[~crowd] = mi
    return classes, areas, crowd.tolist(), counts.tolist(), max_iou.tolist()


def dataset_statistics(
    d: coco.Dataset,
    cfg: AnchorConfig = AnchorConfig(),
    basis: SizeBasis = SizeBasis.MASK,
    jobs: int = 1,
) -> SizeClassStats:
    """Object, image, area and anchor-matching shares per size class.

    Crowd annotations count toward object, image and area shares but are not
    matched against anchors, as an RPN ignores them. Sums of floats use
    ``math.fsum`` over values gathered in dataset order, so the result does
    not depend on ``jobs``.
    """
    if not d.annotations:
        raise EmptyDataset("dataset has no annotations")
    cfg_dict = asdict(cfg)
    tasks = []
    for img in d.images:
        anns = sorted(d.annotations_for(img.id), key=lambda a: a.id)
        entries = [(tuple(float(v) for v in a.bbox), float(a.area), a.iscrowd) for a in anns]
        tasks.append((img.width, img.height, entries, cfg_dict, basis.value))
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            results = list(ex.map(_image_task, tasks, chunksize=max(1, len(tasks) // (jobs * 8))))
    else:
        results = [_image_task(t) for t in tasks]

    n_cls = len(SIZE_CLASSES)
    obj_count = [0] * n_cls
    img_count = [0] * n_cls
    matched = [0] * n_cls
    matched_objs = [0] * n_cls
    area_vals = [[] for _ in range(n_cls)]
    iou_vals = [[] for _ in range(n_cls)]
    for classes, areas, crowd, counts, max_iou in results:
        present = set()
        for k, c in enumerate(classes):
            obj_count[c] += 1
            area_vals[c].append(areas[k])
            present.add(c)
            if not crowd[k]:
                matched[c] += counts[k]
                matched_objs[c] += 1
                iou_vals[c].append(max_iou[k])
        for c in present:
            img_count[c] += 1

    total_objects = sum(obj_count)
    total_area = math.fsum(v for vals in area_vals for v in vals)
    total_matched = sum(matched)
    stats = {}
    for c, cls in enumerate(SIZE_CLASSES):
        s = ClassStats(
            object_count=obj_count[c],
            image_count=img_count[c],
            total_area=math.fsum(area_vals[c]),
            matched_anchors=matched[c],
            matched_objects=matched_objs[c],
            sum_max_iou=math.fsum(iou_vals[c]),
        )
        s.object_count_pct = 100.0 * obj_count[c] / total_objects
        s.images_pct = 100.0 * img_count[c] / len(d.images)
        s.total_area_pct = 100.0 * s.total_area / total_area if total_area > 0 else 0.0
        s.matched_anchors_pct = 100.0 * matched[c] / total_matched if total_matched else 0.0
        s.avg_matching_anchors = matched[c] / matched_objs[c] if matched_objs[c] else 0.0
        s.avg_max_iou = s.sum_max_iou / matched_objs[c] if matched_objs[c] else 0.0
        stats[cls.value] = s
    config = {
        "anchors": {k: (list(v) if isinstance(v, tuple) else v) for k, v in cfg_dict.items()},
        "size_basis": basis.value,
        "backend": BACKEND,
    }
    return SizeClassStats(stats, len(d.images), total_objects, config)


def dumps_stats(stats: SizeClassStats) -> str:
    return json.dumps(stats.to_json(), indent=2, sort_keys=True)
