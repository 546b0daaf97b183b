"""Small-object statistics and copy-paste augmentation for COCO-format datasets."""

from smallaug._backend import BACKEND
from smallaug.anchors import AnchorConfig, box_iou, dataset_statistics, generate_anchors, match_anchors
from smallaug.augment import (
    AllObjects,
    AugmentationConfig,
    GaussianEdge,
    HardBlend,
    MultipleObjects,
    OverlapPolicy,
    SingleObject,
    augment_image,
)
from smallaug.coco import Dataset, SizeBasis, SizeClass, classify_size, load_dataset, save_dataset
from smallaug.pipeline import Mode, PipelinePlan, build_output, oversample_dataset

__version__ = "0.1.0"
