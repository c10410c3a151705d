"""Uncertainty-aware label assignment and open-set detection evaluation."""

__version__ = "0.1.0"

from .data import CategorySpace, Dataset, Detection, DetectionTable, load_annotations, load_detections
from .geometry import BBox, from_xywh, iou
from .metrics import EvalConfig, EvalReport, evaluate

__all__ = [
    "BBox",
    "CategorySpace",
    "Dataset",
    "Detection",
    "DetectionTable",
    "EvalConfig",
    "EvalReport",
    "evaluate",
    "from_xywh",
    "iou",
    "load_annotations",
    "load_detections",
]
