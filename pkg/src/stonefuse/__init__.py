"""Kidney detection, two-ROI correction and stone classification on coronal CT images."""

__version__ = "0.1.0"

from .classifier import ClassifierConfig, ImageVerdict, Verdict, aggregate, classify, sigmoid
from .corrector import EXCLUDED, Excluded, Provenance, RoiPair, count_histogram, correct
from .dataprep import AugmentConfig, Manifest, ManifestRow, augment, build_manifest
from .detector import DetectorConfig, InferenceBackend, OnnxBackend, ReplayFixture, StubBackend, detect, iou, nms
from .evaluation import ConfusionMatrix, EvalReport, compare_to_reference, score
from .imaging import BoxXYXY, LetterboxMap, crop, decode_image, letterbox, mirror_box, normalize, unmap_box
from .pipeline import ImageResult, Pipeline, PipelineConfig, bench, run_pipeline

__all__ = [
    "AugmentConfig",
    "BoxXYXY",
    "ClassifierConfig",
    "ConfusionMatrix",
    "DetectorConfig",
    "EXCLUDED",
    "EvalReport",
    "Excluded",
    "ImageResult",
    "ImageVerdict",
    "InferenceBackend",
    "LetterboxMap",
    "Manifest",
    "ManifestRow",
    "OnnxBackend",
    "Pipeline",
    "PipelineConfig",
    "Provenance",
    "ReplayFixture",
    "RoiPair",
    "StubBackend",
    "Verdict",
    "aggregate",
    "augment",
    "bench",
    "build_manifest",
    "classify",
    "compare_to_reference",
    "correct",
    "count_histogram",
    "crop",
    "decode_image",
    "detect",
    "iou",
    "letterbox",
    "mirror_box",
    "nms",
    "normalize",
    "run_pipeline",
    "score",
    "sigmoid",
    "unmap_box",
]
