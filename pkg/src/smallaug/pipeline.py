"""Dataset-level orchestration: oversampling, output composition and writing."""

from __future__ import annotations

import enum
import json
import logging
import shutil
import tempfile
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path, PurePosixPath

import numpy as np
from PIL import Image

from smallaug import augment, coco
from smallaug._backend import BACKEND
from smallaug.augment import AugmentationConfig
from smallaug.coco import AnnotationRecord, Dataset, ImageRecord, SizeBasis

logger = logging.getLogger(__name__)

JPEG_QUALITY = 95


class MissingImageFile(FileNotFoundError):
    def __init__(self, path):
        super().__init__(f"image file not found: {path}")
        self.path = str(path)


class Mode(enum.Enum):
    REPLACE = "replace"
    AUG_OVERSAMPLE = "aug+oversample"
    ORIGINAL_PLUS_AUG = "original+aug"


@dataclass(frozen=True)
class PipelinePlan:
    output_dir: Path
    images_dir: Path | None = None
    oversample_ratio: int = 1
    mode: Mode = Mode.ORIGINAL_PLUS_AUG
    # duplicates per augmented image under Mode.AUG_OVERSAMPLE
    aug_oversample_ratio: int = 2
    aug: AugmentationConfig | None = None
    seed: int = 0
    jobs: int = 1
    size_basis: SizeBasis = SizeBasis.MASK
    overwrite: bool = False

    def __post_init__(self):
        if self.oversample_ratio < 1:
            raise ValueError("oversample_ratio must be >= 1")
        if self.aug_oversample_ratio < 1:
            raise ValueError("aug_oversample_ratio must be >= 1")


@dataclass
class RunReport:
    images_in: int = 0
    images_out: int = 0
    augmented_images: int = 0
    annotations_in: dict = field(default_factory=dict)
    annotations_out: dict = field(default_factory=dict)
    paste_attempts: int = 0
    paste_successes: int = 0
    paste_failures: int = 0
    failure_reasons: dict = field(default_factory=dict)
    wall_time_s: float = 0.0
    config: dict = field(default_factory=dict)

    def to_json(self):
        return {
            "images_in": self.images_in,
            "images_out": self.images_out,
            "augmented_images": self.augmented_images,
            "annotations_in": self.annotations_in,
            "annotations_out": self.annotations_out,
            "paste_attempts": self.paste_attempts,
            "paste_successes": self.paste_successes,
            "paste_failures": self.paste_failures,
            "failure_reasons": self.failure_reasons,
            "wall_time_s": self.wall_time_s,
            "config": self.config,
        }


def has_small_object(anns, basis: SizeBasis = SizeBasis.MASK) -> bool:
    return any(coco.classify_size(a, basis) is coco.SizeClass.SMALL for a in anns)


def _suffixed(file_name: str, tag: str) -> str:
    p = PurePosixPath(file_name)
    return str(p.with_name(f"{p.stem}_{tag}{p.suffix}"))


def oversample_dataset(d: Dataset, ratio: int, basis: SizeBasis = SizeBasis.MASK) -> Dataset:
    """Repeat every image holding a small object so it appears ``ratio`` times.

    Copies follow their original, get fresh image and annotation ids above
    the current maxima and a ``_os<k>`` file-name suffix pointing at the same
    pixels. Other images appear once.
    """
    if ratio < 1:
        raise ValueError("ratio must be >= 1")
    if ratio == 1:
        return d
    next_img = d.max_image_id + 1
    next_ann = d.max_annotation_id + 1
    images, anns = [], []
    for img in d.images:
        own = d.annotations_for(img.id)
        images.append(img)
        anns.extend(own)
        if not has_small_object(own, basis):
            continue
        for k in range(1, ratio):
            images.append(replace(img, id=next_img, file_name=_suffixed(img.file_name, f"os{k}")))
            for a in own:
                anns.append(replace(a, id=next_ann, image_id=next_img))
                next_ann += 1
            next_img += 1
    return Dataset(tuple(images), tuple(anns), d.categories, d.header)


@dataclass(frozen=True)
class _Item:
    """One output image to produce."""

    kind: str  # "copy" or "aug"
    image: ImageRecord
    annotations: tuple[AnnotationRecord, ...]
    copy_index: int
    file_name: str
    src_path: str
    dup_names: tuple[str, ...] = ()
    first_paste_id: int = 0
    seed: int = 0


def _plan_items(d: Dataset, plan: PipelinePlan, images_dir: Path) -> list[_Item]:
    items = []
    next_paste = d.max_annotation_id + 1
    for img in d.images:
        own = tuple(d.annotations_for(img.id))
        src = str(images_dir / img.file_name)
        small = has_small_object(own, plan.size_basis)
        copies = plan.oversample_ratio if small else 1
        for k in range(copies):
            name = img.file_name if k == 0 else _suffixed(img.file_name, f"os{k}")
            if plan.aug is None or not small:
                items.append(_Item("copy", img, own, k, name, src))
                continue
            if plan.mode is Mode.ORIGINAL_PLUS_AUG:
                items.append(_Item("copy", img, own, k, name, src))
            aug_name = _suffixed(img.file_name, f"aug{k}")
            dups = ()
            if plan.mode is Mode.AUG_OVERSAMPLE:
                dups = tuple(
                    _suffixed(img.file_name, f"aug{k}_dup{j}") for j in range(1, plan.aug_oversample_ratio)
                )
            items.append(
                _Item(
                    "aug", img, own, k, aug_name, src, dups,
                    first_paste_id=next_paste,
                    seed=augment.derive_seed(plan.seed, img.id, k),
                )
            )
            next_paste += augment.max_pastes(own, plan.aug)
    return items


def read_image(path) -> tuple[np.ndarray, str]:
    """Pixels as uint8 (H, W) or (H, W, C) plus the PIL format name."""
    with Image.open(path) as im:
        fmt = im.format or "PNG"
        if im.mode not in ("L", "RGB", "RGBA"):
            im = im.convert("RGB")
        return np.asarray(im).copy(), fmt


def write_image(path, pixels: np.ndarray, fmt: str) -> None:
    im = Image.fromarray(pixels)
    if fmt.upper() in ("JPEG", "JPG"):
        if im.mode == "RGBA":
            im = im.convert("RGB")
        im.save(path, format="JPEG", quality=JPEG_QUALITY)
    else:
        im.save(path, format=fmt)


def _run_item(args):
    item, cfg, out_images = args
    dst = Path(out_images) / item.file_name
    dst.parent.mkdir(parents=True, exist_ok=True)
    if item.kind == "copy":
        shutil.copyfile(item.src_path, dst)
        return None
    pixels, fmt = read_image(item.src_path)
    if pixels.shape[:2] != (item.image.height, item.image.width):
        raise ValueError(f"{item.src_path}: pixel size does not match image record {item.image.id}")
    result = augment.augment_image(pixels, item.image, item.annotations, cfg, item.seed, item.first_paste_id)
    write_image(dst, result.pixels, fmt)
    for dup in item.dup_names:
        shutil.copyfile(dst, Path(out_images) / dup)
    return result.annotations, result.provenance, result.failures


def build_output(d: Dataset, plan: PipelinePlan) -> tuple[Dataset, RunReport]:
    """Produce and write the output dataset described by ``plan``.

    Writes ``annotations.json``, ``images/``, ``provenance.json``,
    ``report.json`` and ``idmap.json`` into ``plan.output_dir``. Work happens
    in a temporary sibling directory that replaces the target only on
    success. Output bytes do not depend on ``plan.jobs``.
    """
    start = time.perf_counter()
    images_dir = Path(plan.images_dir) if plan.images_dir is not None else None
    out_dir = Path(plan.output_dir)
    if images_dir is None:
        raise ValueError("images_dir is required")
    if out_dir.exists() and any(out_dir.iterdir()) and not plan.overwrite:
        raise FileExistsError(f"output directory {out_dir} is not empty")

    items = _plan_items(d, plan, images_dir)
    for it in items:
        if not Path(it.src_path).is_file():
            raise MissingImageFile(it.src_path)
    names = [n for it in items for n in (it.file_name, *it.dup_names)]
    if len(set(names)) != len(names):
        raise ValueError("output file names collide; rename inputs that end in _os<k>/_aug<k>")

    out_dir.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=f".{out_dir.name}.", dir=out_dir.parent))
    try:
        (tmp / "images").mkdir()
        tasks = [(it, plan.aug, str(tmp / "images")) for it in items]
        if plan.jobs > 1:
            with ProcessPoolExecutor(max_workers=plan.jobs) as ex:
                results = list(ex.map(_run_item, tasks, chunksize=max(1, len(tasks) // (plan.jobs * 4))))
        else:
            results = [_run_item(t) for t in tasks]
        out, report, provenance, idmap = _assemble(d, plan, items, results)
        report.wall_time_s = round(time.perf_counter() - start, 3)
        coco.save_dataset(out, tmp / "annotations.json")
        _dump(tmp / "provenance.json", provenance)
        _dump(tmp / "idmap.json", idmap)
        _dump(tmp / "report.json", report.to_json())
        if out_dir.exists():
            shutil.rmtree(out_dir)
        tmp.rename(out_dir)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    return out, report


def _dump(path, obj):
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def _assemble(d, plan, items, results):
    images, anns = [], []
    img_map, ann_map, prov_images = [], [], []
    report = RunReport(images_in=len(d.images))
    report.annotations_in = coco.size_class_counts(d.annotations, plan.size_basis)
    reasons: dict[str, int] = {}

    def emit_image(item, name, augmented, src_anns, pastes, failures):
        new_img_id = len(images) + 1
        images.append(replace(item.image, id=new_img_id, file_name=name))
        img_map.append({
            "new": new_img_id,
            "source": item.image.id,
            "copy_index": item.copy_index,
            "augmented": augmented,
        })
        local = {}
        for a in src_anns:
            new_ann_id = len(anns) + 1
            local[a.id] = new_ann_id
            anns.append(replace(a, id=new_ann_id, image_id=new_img_id))
            is_paste = a.id in pastes
            ann_map.append({
                "new": new_ann_id,
                "source": None if is_paste else a.id,
                "paste": is_paste,
            })
        if augmented:
            prov_images.append({
                "image_id": new_img_id,
                "source_image_id": item.image.id,
                "copy_index": item.copy_index,
                "seed": item.seed,
                "pastes": [
                    dict(p.to_json(), new_annotation_id=local[p.new_annotation_id])
                    for p in pastes.values()
                ],
                "failures": [f.to_json() for f in failures],
            })

    for item, res in zip(items, results):
        if item.kind == "copy":
            emit_image(item, item.file_name, False, item.annotations, {}, [])
            continue
        new_anns, records, failures = res
        pastes = {r.new_annotation_id: r for r in records}
        report.augmented_images += 1
        report.paste_successes += len(records)
        report.paste_failures += len(failures)
        for f in failures:
            reasons[f.reason] = reasons.get(f.reason, 0) + 1
        for name in (item.file_name, *item.dup_names):
            emit_image(item, name, True, new_anns, pastes, failures)

    report.paste_attempts = report.paste_successes + report.paste_failures
    report.failure_reasons = dict(sorted(reasons.items()))
    report.images_out = len(images)
    report.annotations_out = coco.size_class_counts(anns, plan.size_basis)
    report.config = {
        "seed": plan.seed,
        "jobs": plan.jobs,
        "oversample_ratio": plan.oversample_ratio,
        "mode": plan.mode.value if plan.aug is not None else None,
        "aug_oversample_ratio": plan.aug_oversample_ratio,
        "size_basis": plan.size_basis.value,
        "augmentation": describe_aug(plan.aug),
        "backend": BACKEND,
    }
    out = Dataset(tuple(images), tuple(anns), d.categories, d.header)
    provenance = {"seed": plan.seed, "images": prov_images}
    idmap = {"images": img_map, "annotations": ann_map}
    return out, report, provenance, idmap


def describe_aug(cfg: AugmentationConfig | None):
    if cfg is None:
        return None
    st = cfg.strategy
    strategy = {"type": type(st).__name__, "copies": st.copies}
    if isinstance(st, augment.MultipleObjects):
        strategy["object_fraction"] = st.object_fraction
    blend = "hard" if isinstance(cfg.blend, augment.HardBlend) else f"gaussian:{cfg.blend.kernel}"
    return {
        "strategy": strategy,
        "scale_range": list(cfg.scale_range),
        "rotation_range": list(cfg.rotation_range),
        "border_margin": cfg.border_margin,
        "overlap_policy": cfg.overlap_policy.value,
        "overlap_granularity": cfg.overlap_granularity,
        "blend": blend,
        "max_placement_attempts": cfg.max_placement_attempts,
        "size_basis": cfg.size_basis.value,
    }
