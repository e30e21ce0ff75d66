"""Test-time prompt tuning with generated views and cosine fidelity filtration."""

__version__ = "0.1.0"

from .augmentation import AugmentConfig, ViewBatch, ViewSource, assemble_view_batch
from .encoder import ClassVocabulary, EncoderWeights, ImageSample, PromptContext
from .selection import SelectionMask
from .tuner import AdaptationReport, PredictionRule, TuningConfig, adapt, zero_shot_predict

__all__ = [
    "AdaptationReport",
    "AugmentConfig",
    "ClassVocabulary",
    "EncoderWeights",
    "ImageSample",
    "PredictionRule",
    "PromptContext",
    "SelectionMask",
    "TuningConfig",
    "ViewBatch",
    "ViewSource",
    "adapt",
    "assemble_view_batch",
    "zero_shot_predict",
]
