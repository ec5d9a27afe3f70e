"""Audio deepfake detection with multi-granularity adaptive attention (numpy)."""

from .degrade import CodecId, CodecManifest, DegradationSpec, LossModel, degrade, gilbert_elliott_for_plr
from .evaluation import ConditionMatrix, ScoreSet, build_conditions, eer, evaluate, separability
from .features import AudioSegment, FeatureKind, TFFeature, extract
from .model import ABLATIONS, MGAANet, ModelConfig, ablation_config
from .train import TrainConfig, train

__all__ = [
    "ABLATIONS",
    "AudioSegment",
    "CodecId",
    "CodecManifest",
    "ConditionMatrix",
    "DegradationSpec",
    "FeatureKind",
    "LossModel",
    "MGAANet",
    "ModelConfig",
    "ScoreSet",
    "TFFeature",
    "TrainConfig",
    "ablation_config",
    "build_conditions",
    "degrade",
    "eer",
    "evaluate",
    "extract",
    "gilbert_elliott_for_plr",
    "separability",
    "train",
]
__version__ = "0.1.0"
