"""Synthetic COCO corpora of flat-colour shapes, annotated exactly."""

from __future__ import annotations

import math
import shutil
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from smallaug import augment, coco, masks
from smallaug.coco import AnnotationRecord, Category, Dataset, ImageRecord, PolygonSet, SizeClass
from smallaug.pipeline import write_image

SHAPES = ("rectangle", "ellipse", "triangle")


class InfeasibleSpec(ValueError):
    pass


@dataclass(frozen=True)
class SynthSpec:
    images: int = 20
    width: int = 256
    height: int = 256
    small: int = 3
    medium: int = 0
    large: int = 1
    # inclusive side-length ranges used to draw each class
    small_size: tuple[int, int] = (8, 28)
    medium_size: tuple[int, int] = (40, 90)
    large_size: tuple[int, int] = (100, 150)
    margin: int = 2
    max_tries: int = 500


def _shape_polygon(kind: str, x: float, y: float, w: float, h: float) -> list[float]:
    if kind == "rectangle":
        pts = [(x, y), (x + w, y), (x + w, y + h), (x, y + h)]
    elif kind == "triangle":
        pts = [(x, y + h), (x + w / 2.0, y), (x + w, y + h)]
    else:
        n = 24
        cx, cy = x + w / 2.0, y + h / 2.0
        pts = [
            (round(cx + w / 2.0 * math.cos(2 * math.pi * i / n), 2),
             round(cy + h / 2.0 * math.sin(2 * math.pi * i / n), 2))
            for i in range(n)
        ]
    return [float(v) for p in pts for v in p]


def _draw_object(rng, spec, cls: SizeClass, occupied):
    lo, hi = {
        SizeClass.SMALL: spec.small_size,
        SizeClass.MEDIUM: spec.medium_size,
        SizeClass.LARGE: spec.large_size,
    }[cls]
    room_w = spec.width - 2 * spec.margin
    room_h = spec.height - 2 * spec.margin
    if lo > room_w or lo > room_h:
        raise InfeasibleSpec(f"{cls.value} objects of size >= {lo} do not fit in {spec.width}x{spec.height}")
    for _ in range(spec.max_tries):
        kind = SHAPES[int(rng.integers(len(SHAPES)))]
        w = int(rng.integers(lo, min(hi, room_w) + 1))
        h = int(rng.integers(lo, min(hi, room_h) + 1))
        x = int(rng.integers(spec.margin, spec.width - spec.margin - w + 1))
        y = int(rng.integers(spec.margin, spec.height - spec.margin - h + 1))
        poly = _shape_polygon(kind, x, y, w, h)
        m = masks.rasterize_polygons([poly], spec.width, spec.height)
        area = masks.mask_area(m)
        bb = masks.mask_bbox(m)
        if bb is None:
            continue
        # the class must hold under both mask-area and bbox-area bases
        if coco.classify_area(area) is not cls or coco.classify_area(bb[2] * bb[3]) is not cls:
            continue
        if np.logical_and(occupied, m).any():
            continue
        return kind, poly, m, area, bb
    raise InfeasibleSpec(f"could not place a non-overlapping {cls.value} object")


def generate_synthetic_corpus(spec: SynthSpec, seed: int, out_dir) -> Dataset:
    """Write ``annotations.json`` and ``images/*.png`` under ``out_dir``.

    Objects never overlap; each annotation's area and bbox are computed from
    the rasterized polygon that was painted, so they are exact.
    """
    if spec.width < 64 or spec.height < 64:
        raise InfeasibleSpec("images must be at least 64x64")
    if min(spec.images, spec.small, spec.medium, spec.large) < 0:
        raise InfeasibleSpec("counts must be non-negative")
    out_dir = Path(out_dir)
    rng = augment.make_rng(seed)
    categories = tuple(Category(i + 1, name) for i, name in enumerate(SHAPES))
    cat_id = {c.name: c.id for c in categories}
    images, anns, rasters = [], [], []
    plan = [SizeClass.LARGE] * spec.large + [SizeClass.MEDIUM] * spec.medium + [SizeClass.SMALL] * spec.small
    for i in range(spec.images):
        img = ImageRecord(i + 1, spec.width, spec.height, f"{i + 1:06d}.png")
        bg = rng.integers(0, 256, size=3)
        pixels = np.empty((spec.height, spec.width, 3), dtype=np.uint8)
        pixels[...] = bg
        occupied = masks.empty_mask(spec.width, spec.height)
        for cls in plan:
            kind, poly, m, area, bb = _draw_object(rng, spec, cls, occupied)
            occupied |= m
            color = rng.integers(0, 256, size=3)
            # keep shapes distinguishable from the background
            if np.abs(color.astype(int) - bg.astype(int)).sum() < 60:
                color = 255 - bg
            pixels[m.astype(bool)] = color
            anns.append(
                AnnotationRecord(
                    id=len(anns) + 1,
                    image_id=img.id,
                    category_id=cat_id[kind],
                    bbox=tuple(float(v) for v in bb),
                    area=area,
                    segmentation=PolygonSet((tuple(poly),)),
                    iscrowd=False,
                )
            )
        images.append(img)
        rasters.append(pixels)
    d = Dataset(tuple(images), tuple(anns), categories, {"info": {"description": "synthetic shapes"}})

    out_dir.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=f".{out_dir.name}.", dir=out_dir.parent))
    try:
        (tmp / "images").mkdir()
        for img, px in zip(images, rasters):
            write_image(tmp / "images" / img.file_name, px, "PNG")
        coco.save_dataset(d, tmp / "annotations.json")
        if out_dir.exists():
            shutil.rmtree(out_dir)
        tmp.rename(out_dir)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    return d
