"""COVID-19 classification of chest CT volumes with a 3D CNN-BERT and a pooled-feature MLP."""

from .classifier import CNNBertClassifier, PreparedVolume, VolumePrediction, predict_volume, train_classifier
from .config import RunConfig, load_config
from .features import EmbeddingRecord, FeatureMLPClassifier, pool_features, read_feature_cache, write_feature_cache
from .ingest import CTVolume, ManifestEntry, load_volume, normalize_slice, scan_dataset
from .metrics import MetricsReport, evaluate
from .models import CNNBert
from .morph import CoarseMask, MorphologicalSegmenter, segment_morphological, volume_bbox
from .pipeline import run_pipeline
from .selection import SelectionResult, SliceSet, resample_eval, resample_test, resample_train, select_slices
from .unet import SegModel, UNetSegmenter, apply_mask, infer_mask, refine_mask, train_unet

__version__ = "0.1.0"

__all__ = [
    "CNNBert",
    "CNNBertClassifier",
    "CTVolume",
    "CoarseMask",
    "EmbeddingRecord",
    "FeatureMLPClassifier",
    "ManifestEntry",
    "MetricsReport",
    "MorphologicalSegmenter",
    "PreparedVolume",
    "RunConfig",
    "SegModel",
    "SelectionResult",
    "SliceSet",
    "UNetSegmenter",
    "VolumePrediction",
    "apply_mask",
    "evaluate",
    "infer_mask",
    "load_config",
    "load_volume",
    "normalize_slice",
    "pool_features",
    "predict_volume",
    "read_feature_cache",
    "refine_mask",
    "resample_eval",
    "resample_test",
    "resample_train",
    "run_pipeline",
    "scan_dataset",
    "segment_morphological",
    "select_slices",
    "train_classifier",
    "train_unet",
    "volume_bbox",
    "write_feature_cache",
]
