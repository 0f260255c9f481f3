"""Super-resolution of wireless channel-characteristic maps on a small numpy autodiff engine."""

from .characteristics import DEFAULT_SPECS, KINDS, REGRESSION_TARGETS, TARGETS, CharacteristicSpec
from .dataset import Dataset, generate_dataset, read_dataset, split, write_dataset
from .losses import EvalReport, LossWeights, composite_loss
from .model import Model, ModelConfig, build_model, forward, load_checkpoint, predict, save_checkpoint
from .scene import PropagationParams, generate_sample, generate_scene
from .trainer import TrainConfig, evaluate, finetune_heads, run_ablation, train

__version__ = "0.1.0"

__all__ = [
    "DEFAULT_SPECS", "KINDS", "REGRESSION_TARGETS", "TARGETS", "CharacteristicSpec",
    "Dataset", "generate_dataset", "read_dataset", "split", "write_dataset",
    "EvalReport", "LossWeights", "composite_loss",
    "Model", "ModelConfig", "build_model", "forward", "load_checkpoint", "predict", "save_checkpoint",
    "PropagationParams", "generate_sample", "generate_scene",
    "TrainConfig", "evaluate", "finetune_heads", "run_ablation", "train",
]
