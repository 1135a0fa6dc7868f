"""Desk-scale trainable human-object interaction detector.

A transformer set-prediction detector whose learned queries are refined by
support features — semantic sentence embeddings fused with sampled spatial
layouts — for the object-action pairs the image most likely contains.
"""

from .data import (
    ActionClass,
    DatasetError,
    HOIDataset,
    HOIInstance,
    ImageAnnotation,
    OAVocabulary,
    ObjectClass,
    default_vocabulary,
    load_dataset,
    save_dataset,
    synth_dataset,
)
from .detector import HOIDetector, load_detector
from .evaluation import Detection, EvalReport, evaluate, predictions_to_detections
from .geometry import RSC, Box, apply_rsc, clamp_box, giou, iou, rsc
from .heads import PredictionSet, weight_scores
from .matching import LossWeights, detection_loss, hungarian, image_loss, match_cost
from .model import HOIModel, ModelConfig, build_model
from .semantic import OneHotProvider, RemoteProvider, TableProvider, templatize
from .spatial import RSCStats, demo_layout_stats, fit_stats, rasterize, sample_pair
from .support import SupportFeatureGenerator, select_topk
from .training import TrainConfig, dump_attention, load_model_from_checkpoint, train

__version__ = "0.1.0"

__all__ = [
    "ActionClass",
    "ObjectClass",
    "OAVocabulary",
    "HOIInstance",
    "ImageAnnotation",
    "HOIDataset",
    "DatasetError",
    "default_vocabulary",
    "load_dataset",
    "save_dataset",
    "synth_dataset",
    "Box",
    "RSC",
    "iou",
    "giou",
    "rsc",
    "apply_rsc",
    "clamp_box",
    "RSCStats",
    "fit_stats",
    "sample_pair",
    "rasterize",
    "demo_layout_stats",
    "OneHotProvider",
    "TableProvider",
    "RemoteProvider",
    "templatize",
    "SupportFeatureGenerator",
    "select_topk",
    "ModelConfig",
    "HOIModel",
    "build_model",
    "PredictionSet",
    "weight_scores",
    "LossWeights",
    "hungarian",
    "match_cost",
    "detection_loss",
    "image_loss",
    "Detection",
    "EvalReport",
    "evaluate",
    "predictions_to_detections",
    "TrainConfig",
    "train",
    "dump_attention",
    "load_model_from_checkpoint",
    "HOIDetector",
    "load_detector",
]
