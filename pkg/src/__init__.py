"""Layout Lab - Source Package"""

__version__ = "0.3.0"
__author__ = "deepak-sekarbabu"
__description__ = "Desk-scale comparison of layout conditioning for multimodal diffusion transformers"

from .base import (
    LabError,
    ConfigurationError,
    ShapeError,
    NumericalError,
    VocabularyError,
    LayoutError,
    CheckpointError,
    TrainingError,
    DatasetError,
    ModelConfig,
    TrainConfig,
    OracleConfig,
    LayoutRulesConfig,
    ExperimentConfig,
)
from .mmdit import ModelWeights, Variant, VariantTag, attach_variant, forward, init_base
from .diffusion import pretrain_base, sample_image, train_layout
from .scenes import gen_scene, oracle_eval
from .layoutkit import validate

__all__ = [
    "LabError",
    "ConfigurationError",
    "ShapeError",
    "NumericalError",
    "VocabularyError",
    "LayoutError",
    "CheckpointError",
    "TrainingError",
    "DatasetError",
    "ModelConfig",
    "TrainConfig",
    "OracleConfig",
    "LayoutRulesConfig",
    "ExperimentConfig",
    "ModelWeights",
    "Variant",
    "VariantTag",
    "attach_variant",
    "forward",
    "init_base",
    "pretrain_base",
    "sample_image",
    "train_layout",
    "gen_scene",
    "oracle_eval",
    "validate",
]
