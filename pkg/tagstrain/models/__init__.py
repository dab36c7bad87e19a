from tagstrain.models.checkpoint import CKPT_MAGIC, ModelCheckpoint, TrainResult
from tagstrain.models.data import Dataset, load_manifest
from tagstrain.models.localizer import Localizer, LocalizerConfig, LocalizerNet, localize, train_localizer
from tagstrain.models.pipeline import Pipeline, PipelineResult, full_pipeline
from tagstrain.models.tracker import Tracker, TrackerConfig, TrackerNet, track, train_tracker

__all__ = [
    "CKPT_MAGIC",
    "ModelCheckpoint",
    "TrainResult",
    "Dataset",
    "load_manifest",
    "Localizer",
    "LocalizerConfig",
    "LocalizerNet",
    "localize",
    "train_localizer",
    "Pipeline",
    "PipelineResult",
    "full_pipeline",
    "Tracker",
    "TrackerConfig",
    "TrackerNet",
    "track",
    "train_tracker",
]
