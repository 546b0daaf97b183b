"""Copy-paste augmentation of small objects within their own image."""

from __future__ import annotations

import enum
import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from smallaug import coco, masks
from smallaug.coco import AnnotationRecord, CompressedRLE, ImageRecord, PolygonSet, SizeBasis

logger = logging.getLogger(__name__)

_MASK64 = (1 << 64) - 1


class PlacementNotFound(RuntimeError):
    pass


class OutOfBounds(ValueError):
    pass


@dataclass(frozen=True)
class SingleObject:
    """One randomly chosen small object, pasted ``copies`` times."""

    copies: int = 1

    def __post_init__(self):
        if not 1 <= self.copies <= 5:
            raise ValueError("SingleObject copies must be in 1..5")


@dataclass(frozen=True)
class MultipleObjects:
    """``ceil(object_fraction * n)`` distinct small objects, each pasted ``copies`` times."""

    object_fraction: float = 0.5
    copies: int = 1

    def __post_init__(self):
        if not 0 < self.object_fraction <= 1:
            raise ValueError("object_fraction must be in (0, 1]")
        if not 1 <= self.copies <= 5:
            raise ValueError("MultipleObjects copies must be in 1..5")


@dataclass(frozen=True)
class AllObjects:
    copies: int = 1

    def __post_init__(self):
        if not 1 <= self.copies <= 3:
            raise ValueError("AllObjects copies must be in 1..3")


Strategy = SingleObject | MultipleObjects | AllObjects


class OverlapPolicy(enum.Enum):
    REJECT = "reject"
    ALLOW = "allow"


@dataclass(frozen=True)
class HardBlend:
    pad = 0


@dataclass(frozen=True)
class GaussianEdge:
    kernel: int = 3

    def __post_init__(self):
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ValueError(f"blur kernel must be odd and positive, got {self.kernel}")

    @property
    def pad(self) -> int:
        return self.kernel // 2


Blend = HardBlend | GaussianEdge


@dataclass(frozen=True)
class AugmentationConfig:
    strategy: Strategy = field(default_factory=AllObjects)
    scale_range: tuple[float, float] = (0.8, 1.2)
    rotation_range: tuple[float, float] = (-15.0, 15.0)
    border_margin: int = 5
    overlap_policy: OverlapPolicy = OverlapPolicy.REJECT
    # "mask" tests pixel overlap, "bbox" tests against object rectangles
    overlap_granularity: str = "mask"
    blend: Blend = field(default_factory=HardBlend)
    max_placement_attempts: int = 100
    size_basis: SizeBasis = SizeBasis.MASK

    def __post_init__(self):
        lo, hi = self.scale_range
        if not 0 < lo <= hi:
            raise ValueError(f"invalid scale range {self.scale_range}")
        if self.rotation_range[0] > self.rotation_range[1]:
            raise ValueError(f"invalid rotation range {self.rotation_range}")
        if self.border_margin < 0 or self.max_placement_attempts < 1:
            raise ValueError("border_margin must be >= 0 and max_placement_attempts >= 1")
        if self.overlap_granularity not in ("mask", "bbox"):
            raise ValueError("overlap_granularity must be 'mask' or 'bbox'")


@dataclass(frozen=True)
class PasteRecord:
    source_annotation_id: int
    scale: float
    rotation: float
    placement: tuple[int, int]
    new_annotation_id: int

    def to_json(self):
        return {
            "source_annotation_id": self.source_annotation_id,
            "scale": self.scale,
            "rotation": self.rotation,
            "placement": list(self.placement),
            "new_annotation_id": self.new_annotation_id,
        }


@dataclass(frozen=True)
class PasteFailure:
    source_annotation_id: int
    scale: float
    rotation: float
    reason: str

    def to_json(self):
        return {
            "source_annotation_id": self.source_annotation_id,
            "scale": self.scale,
            "rotation": self.rotation,
            "reason": self.reason,
        }


@dataclass
class AugmentedImage:
    pixels: np.ndarray
    annotations: list[AnnotationRecord]
    provenance: list[PasteRecord]
    failures: list[PasteFailure]
    pasted_masks: list[np.ndarray] = field(default_factory=list, repr=False)

    @property
    def attempts(self) -> int:
        return len(self.provenance) + len(self.failures)


def splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def derive_seed(seed: int, image_id: int, copy_index: int) -> int:
    """Per-image seed; duplicates of one image get distinct streams via ``copy_index``."""
    h = splitmix64(seed & _MASK64)
    h = splitmix64(h ^ (image_id & _MASK64))
    return splitmix64(h ^ (copy_index & _MASK64))


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed))


def is_candidate(ann: AnnotationRecord, basis: SizeBasis = SizeBasis.MASK) -> bool:
    return (
        not ann.iscrowd
        and isinstance(ann.segmentation, PolygonSet)
        and len(ann.segmentation.polygons) == 1
        and coco.classify_size(ann, basis) is coco.SizeClass.SMALL
    )


def select_candidates(
    annotations: Sequence[AnnotationRecord], basis: SizeBasis = SizeBasis.MASK
) -> list[AnnotationRecord]:
    """Small, non-crowd objects whose segmentation is a single polygon.

    A multi-part polygon is taken as a sign that the object is occluded or
    split, so it is skipped.
    """
    out = []
    for ann in annotations:
        if is_candidate(ann, basis):
            out.append(ann)
        elif (
            not ann.iscrowd
            and isinstance(ann.segmentation, PolygonSet)
            and len(ann.segmentation.polygons) > 1
            and coco.classify_size(ann, basis) is coco.SizeClass.SMALL
        ):
            logger.debug("annotation %s skipped: multi-part segmentation", ann.id)
    return out


def sample_transform(rng: np.random.Generator, cfg: AugmentationConfig | None = None) -> tuple[float, float]:
    cfg = cfg or AugmentationConfig()
    scale = float(rng.uniform(*cfg.scale_range))
    rotation = float(rng.uniform(*cfg.rotation_range))
    return scale, rotation


def _fits(h, w, x, y, occupied, obj_mask, cfg):
    window = occupied[y:y + h, x:x + w]
    if cfg.overlap_granularity == "bbox":
        return not window.any()
    return not np.logical_and(window, obj_mask).any()


def find_placement(
    obj_mask: np.ndarray,
    occupied: np.ndarray,
    dims: tuple[int, int],
    cfg: AugmentationConfig,
    rng: np.random.Generator,
) -> tuple[int, int]:
    """Draw top-left positions until one is admissible, then mark it occupied.

    ``obj_mask`` must be cropped to its bounding box. ``dims`` is
    ``(width, height)``. Raises :class:`PlacementNotFound` when no position
    was found within ``cfg.max_placement_attempts`` draws.
    """
    width, height = dims
    h, w = obj_mask.shape
    m = cfg.border_margin
    x_max = width - m - w
    y_max = height - m - h
    if x_max < m or y_max < m:
        raise PlacementNotFound(f"{w}x{h} object cannot fit {m}px inside {width}x{height}")
    for _ in range(cfg.max_placement_attempts):
        x = int(rng.integers(m, x_max + 1))
        y = int(rng.integers(m, y_max + 1))
        if cfg.overlap_policy is OverlapPolicy.ALLOW or _fits(h, w, x, y, occupied, obj_mask, cfg):
            _mark(occupied, obj_mask, x, y, cfg)
            return x, y
    raise PlacementNotFound(f"no free position after {cfg.max_placement_attempts} attempts")


def _mark(occupied, obj_mask, x, y, cfg):
    h, w = obj_mask.shape
    if cfg.overlap_granularity == "bbox":
        occupied[y:y + h, x:x + w] = 1
    else:
        occupied[y:y + h, x:x + w] |= obj_mask.astype(occupied.dtype)


def _window(arr, y0, x0, h, w, fill_edge):
    """arr[y0:y0+h, x0:x0+w] with out-of-range rows/cols padded (edge or zero)."""
    H, W = arr.shape[:2]
    rows = np.arange(y0, y0 + h)
    cols = np.arange(x0, x0 + w)
    if fill_edge:
        return arr[np.clip(rows, 0, H - 1)[:, None], np.clip(cols, 0, W - 1)[None, :]]
    out = np.zeros((h, w) + arr.shape[2:], dtype=arr.dtype)
    rv = (rows >= 0) & (rows < H)
    cv = (cols >= 0) & (cols < W)
    out[np.ix_(rv, cv)] = arr[np.ix_(rows[rv], cols[cv])]
    return out


def extract_patch(
    image: np.ndarray, obj_mask: np.ndarray, scale: float, rotation: float, pad: int = 0
) -> tuple[np.ndarray, np.ndarray] | None:
    """Cut an object out of ``image`` and apply scale then rotation.

    Returns ``(mask, pixels)``: the transformed mask cropped to its bounding
    box, and the transformed pixels over that box grown by ``pad`` on every
    side (context for edge blending). Masks use nearest-neighbour sampling,
    pixels bilinear. None when the transformed mask is empty.
    """
    bb = masks.mask_bbox(obj_mask)
    if bb is None:
        return None
    x0, y0, w, h = bb
    ctx = pad + 2
    mcrop = _window(obj_mask, y0 - ctx, x0 - ctx, h + 2 * ctx, w + 2 * ctx, fill_edge=False)
    pcrop = _window(image, y0 - ctx, x0 - ctx, h + 2 * ctx, w + 2 * ctx, fill_edge=True)
    try:
        m1 = masks.scale_mask(mcrop, scale)
    except masks.DegenerateOutput:
        return None
    p1 = masks.scale_pixels(pcrop, m1.shape)
    m2 = masks.rotate_mask(m1, rotation)
    p2 = masks.rotate_pixels(p1, rotation)
    tb = masks.mask_bbox(m2)
    if tb is None:
        return None
    bx, by, bw, bh = tb
    mask = np.ascontiguousarray(m2[by:by + bh, bx:bx + bw])
    pixels = _window(p2, by - pad, bx - pad, bh + 2 * pad, bw + 2 * pad, fill_edge=True)
    return mask, pixels


def _composite_inplace(canvas, patch, mask, at, blend):
    x, y = at
    h, w = mask.shape
    H, W = canvas.shape[:2]
    if x < 0 or y < 0 or x + w > W or y + h > H:
        raise OutOfBounds(f"{w}x{h} mask at {at} exceeds {W}x{H} canvas")
    p = (patch.shape[0] - h) // 2
    if patch.shape[0] != h + 2 * p or patch.shape[1] != w + 2 * p:
        raise ValueError("patch must be the mask box grown equally on every side")
    if isinstance(blend, GaussianEdge):
        q = blend.pad
        if q > p:
            raise ValueError(f"patch padding {p} smaller than blur radius {q}")
        alpha = masks.blur_mask(np.pad(mask, q), blend.kernel)
        src = patch[p - q:p + h + q, p - q:p + w + q]
        # clip the alpha support to the canvas
        ty0, tx0 = y - q, x - q
        cy0, cx0 = max(ty0, 0), max(tx0, 0)
        cy1, cx1 = min(y + h + q, H), min(x + w + q, W)
        a = alpha[cy0 - ty0:cy1 - ty0, cx0 - tx0:cx1 - tx0]
        s = src[cy0 - ty0:cy1 - ty0, cx0 - tx0:cx1 - tx0].astype(np.float64)
        region = canvas[cy0:cy1, cx0:cx1]
        if region.ndim == 3:
            a = a[:, :, None]
        base = region.astype(np.float64)
        out = base + a * (s - base)
        if np.issubdtype(canvas.dtype, np.integer):
            info = np.iinfo(canvas.dtype)
            out = np.clip(np.rint(out), info.min, info.max)
        region[...] = out.astype(canvas.dtype)
        return
    sel = mask.astype(bool)
    region = canvas[y:y + h, x:x + w]
    region[sel] = patch[p:p + h, p:p + w][sel]


def composite_paste(
    canvas: np.ndarray, patch: np.ndarray, mask: np.ndarray, at: tuple[int, int], blend: Blend = HardBlend()
) -> np.ndarray:
    """Paste ``patch`` through ``mask`` at top-left ``at`` and return a new raster.

    ``patch`` covers the mask box grown by ``blend.pad`` pixels per side.
    Hard blending copies the masked pixels. ``GaussianEdge`` blurs the mask
    to an alpha map, so pixels up to ``kernel // 2`` outside the mask are
    touched while the interior stays exact.
    """
    out = canvas.copy()
    _composite_inplace(out, patch, mask, at, blend)
    return out


def occupancy(image: ImageRecord, annotations: Sequence[AnnotationRecord], granularity: str = "mask") -> np.ndarray:
    occ = masks.empty_mask(image.width, image.height)
    for ann in annotations:
        if granularity == "bbox":
            x, y, w, h = ann.bbox
            occ[int(math.floor(y)):int(math.ceil(y + h)), int(math.floor(x)):int(math.ceil(x + w))] = 1
        else:
            occ |= coco.annotation_mask(ann, image)
    return occ


def max_pastes(annotations: Sequence[AnnotationRecord], cfg: AugmentationConfig) -> int:
    """Upper bound on pastes for one image; used to pre-allocate annotation ids."""
    n = sum(1 for a in annotations if is_candidate(a, cfg.size_basis))
    if n == 0:
        return 0
    st = cfg.strategy
    if isinstance(st, SingleObject):
        return st.copies
    if isinstance(st, MultipleObjects):
        return math.ceil(st.object_fraction * n) * st.copies
    return n * st.copies


def _paste_plan(candidates, strategy, rng):
    n = len(candidates)
    if isinstance(strategy, SingleObject):
        pick = candidates[int(rng.integers(n))]
        return [pick] * strategy.copies
    if isinstance(strategy, MultipleObjects):
        k = math.ceil(strategy.object_fraction * n)
        chosen = rng.choice(n, size=k, replace=False)
        return [candidates[int(i)] for i in chosen for _ in range(strategy.copies)]
    return [c for c in candidates for _ in range(strategy.copies)]


def augment_image(
    pixels: np.ndarray,
    image: ImageRecord,
    annotations: Sequence[AnnotationRecord],
    cfg: AugmentationConfig,
    seed: int,
    next_annotation_id: int,
) -> AugmentedImage:
    """Paste small objects of one image back into it.

    New annotations get ids ``next_annotation_id, next_annotation_id + 1, ...``
    in paste order and carry an RLE of the pasted mask. Pastes that find no
    placement are recorded as failures and not retried. The result depends
    only on the arguments.
    """
    if pixels.shape[:2] != (image.height, image.width):
        raise ValueError(
            f"image {image.id}: pixels are {pixels.shape[1]}x{pixels.shape[0]}, "
            f"record says {image.width}x{image.height}"
        )
    anns = list(annotations)
    candidates = select_candidates(anns, cfg.size_basis)
    if not candidates:
        return AugmentedImage(pixels.copy(), anns, [], [])
    rng = make_rng(seed)
    plan = _paste_plan(candidates, cfg.strategy, rng)
    canvas = pixels.copy()
    occupied = occupancy(image, anns, cfg.overlap_granularity)
    source_masks = {}
    records, failures, pasted = [], [], []
    next_id = next_annotation_id
    for src in plan:
        scale, rotation = sample_transform(rng, cfg)
        if src.id not in source_masks:
            source_masks[src.id] = coco.annotation_mask(src, image)
        cut = extract_patch(pixels, source_masks[src.id], scale, rotation, pad=cfg.blend.pad)
        if cut is None:
            failures.append(PasteFailure(src.id, scale, rotation, "empty_after_transform"))
            continue
        obj_mask, patch = cut
        try:
            x, y = find_placement(obj_mask, occupied, (image.width, image.height), cfg, rng)
        except PlacementNotFound:
            failures.append(PasteFailure(src.id, scale, rotation, "no_placement"))
            logger.debug("image %s: no placement for annotation %s", image.id, src.id)
            continue
        _composite_inplace(canvas, patch, obj_mask, (x, y), cfg.blend)
        full = masks.empty_mask(image.width, image.height)
        h, w = obj_mask.shape
        full[y:y + h, x:x + w] = obj_mask
        anns.append(
            AnnotationRecord(
                id=next_id,
                image_id=image.id,
                category_id=src.category_id,
                bbox=(x, y, w, h),
                area=masks.mask_area(obj_mask),
                segmentation=CompressedRLE(masks.rle_encode(full), as_string=True),
                iscrowd=False,
            )
        )
        records.append(PasteRecord(src.id, scale, rotation, (x, y), next_id))
        pasted.append(full)
        next_id += 1
    return AugmentedImage(canvas, anns, records, failures, pasted)
