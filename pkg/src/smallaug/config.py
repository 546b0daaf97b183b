"""Layered configuration: built-in defaults < TOML file < command-line flags.

File layout (every key optional)::

    seed = 42
    jobs = 4
    size_basis = "mask"            # or "bbox"

    [anchors]
    strides = [4, 8, 16, 32, 64]
    base_sizes = [32, 64, 128, 256, 512]
    aspect_ratios = [1.0, 0.5, 2.0]
    positive_iou = 0.7
    force_argmax = true
    straddle = -1                  # < 0 keeps every anchor
    resize = []                    # [short, long_cap] to resize first

    [augment]
    strategy = "all"               # single | multiple | all
    copies = 1
    object_fraction = 0.5
    scale_range = [0.8, 1.2]
    rotation_range = [-15.0, 15.0]
    border_margin = 5
    overlap = "reject"             # reject | allow
    overlap_granularity = "mask"   # mask | bbox
    blend = "hard"                 # hard | gaussian:<odd k>
    max_placement_attempts = 100

    [pipeline]
    mode = "original+aug"          # replace | aug+oversample | original+aug
    oversample_ratio = 1
    aug_oversample_ratio = 2

    [synth]
    images = 20
    width = 256
    height = 256
    small = 3
    medium = 0
    large = 1

Unknown sections or keys are rejected.
"""

from __future__ import annotations

import copy
import sys

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from smallaug import augment
from smallaug.anchors import AnchorConfig
from smallaug.coco import SizeBasis
from smallaug.pipeline import Mode
from smallaug.synth import SynthSpec


class ConfigError(ValueError):
    pass


DEFAULTS = {
    "seed": None,
    "jobs": 1,
    "size_basis": "mask",
    "anchors": {
        "strides": [4, 8, 16, 32, 64],
        "base_sizes": [32, 64, 128, 256, 512],
        "aspect_ratios": [1.0, 0.5, 2.0],
        "positive_iou": 0.7,
        "force_argmax": True,
        "straddle": -1.0,
        "resize": [],
    },
    "augment": {
        "strategy": "all",
        "copies": 1,
        "object_fraction": 0.5,
        "scale_range": [0.8, 1.2],
        "rotation_range": [-15.0, 15.0],
        "border_margin": 5,
        "overlap": "reject",
        "overlap_granularity": "mask",
        "blend": "hard",
        "max_placement_attempts": 100,
    },
    "pipeline": {
        "mode": "original+aug",
        "oversample_ratio": 1,
        "aug_oversample_ratio": 2,
    },
    "synth": {
        "images": 20,
        "width": 256,
        "height": 256,
        "small": 3,
        "medium": 0,
        "large": 1,
    },
}


def _merge(base: dict, over: dict, where: str = "") -> None:
    for key, value in over.items():
        path = f"{where}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key {path!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {path!r} must be a table")
            _merge(base[key], value, path + ".")
        else:
            base[key] = value


def load_config(path=None, overrides: dict | None = None) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        try:
            with open(path, "rb") as fh:
                data = tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
        _merge(cfg, data)
    if overrides:
        _merge(cfg, overrides)
    return cfg


def anchor_config(cfg: dict) -> AnchorConfig:
    a = cfg["anchors"]
    try:
        return AnchorConfig(
            strides=tuple(float(s) for s in a["strides"]),
            base_sizes=tuple(float(b) for b in a["base_sizes"]),
            aspect_ratios=tuple(float(r) for r in a["aspect_ratios"]),
            positive_iou=float(a["positive_iou"]),
            force_argmax=bool(a["force_argmax"]),
            straddle=None if a["straddle"] is None or a["straddle"] < 0 else float(a["straddle"]),
            resize=tuple(int(v) for v in a["resize"]) if a["resize"] else None,
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"anchors: {exc}") from None


def size_basis(cfg: dict) -> SizeBasis:
    try:
        return SizeBasis(cfg["size_basis"])
    except ValueError:
        raise ConfigError(f"size_basis must be 'mask' or 'bbox', got {cfg['size_basis']!r}") from None


def parse_blend(text: str):
    if text == "hard":
        return augment.HardBlend()
    if text.startswith("gaussian:"):
        try:
            return augment.GaussianEdge(int(text.split(":", 1)[1]))
        except ValueError as exc:
            raise ConfigError(f"blend: {exc}") from None
    raise ConfigError(f"blend must be 'hard' or 'gaussian:<odd k>', got {text!r}")


def augmentation_config(cfg: dict) -> augment.AugmentationConfig:
    a = cfg["augment"]
    try:
        strategy = {
            "single": lambda: augment.SingleObject(int(a["copies"])),
            "multiple": lambda: augment.MultipleObjects(float(a["object_fraction"]), int(a["copies"])),
            "all": lambda: augment.AllObjects(int(a["copies"])),
        }[a["strategy"]]()
    except KeyError:
        raise ConfigError(f"strategy must be single, multiple or all, got {a['strategy']!r}") from None
    except ValueError as exc:
        raise ConfigError(f"augment: {exc}") from None
    try:
        return augment.AugmentationConfig(
            strategy=strategy,
            scale_range=tuple(float(v) for v in a["scale_range"]),
            rotation_range=tuple(float(v) for v in a["rotation_range"]),
            border_margin=int(a["border_margin"]),
            overlap_policy=augment.OverlapPolicy(a["overlap"]),
            overlap_granularity=a["overlap_granularity"],
            blend=parse_blend(a["blend"]),
            max_placement_attempts=int(a["max_placement_attempts"]),
            size_basis=size_basis(cfg),
        )
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"augment: {exc}") from None


def pipeline_mode(cfg: dict) -> Mode:
    try:
        return Mode(cfg["pipeline"]["mode"])
    except ValueError:
        raise ConfigError(f"unknown mode {cfg['pipeline']['mode']!r}") from None


def synth_spec(cfg: dict) -> SynthSpec:
    s = cfg["synth"]
    return SynthSpec(**{k: int(v) for k, v in s.items()})
