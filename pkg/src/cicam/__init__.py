"""Class activation maps with a causal context pool for weakly supervised localization."""

from .combiner import CombinerConfig, localization_map
from .datagen import SceneSpec, generate_dataset
from .evaluator import MetricReport, evaluate
from .localizer import LocalizerConfig, segment_box
from .model import CICAM, ModelConfig, build_model
from .trainer import TrainConfig, train

__all__ = [
    "CICAM",
    "CombinerConfig",
    "LocalizerConfig",
    "MetricReport",
    "ModelConfig",
    "SceneSpec",
    "TrainConfig",
    "build_model",
    "evaluate",
    "generate_dataset",
    "localization_map",
    "segment_box",
    "train",
]
__version__ = "0.1.0"
