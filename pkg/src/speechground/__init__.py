"""Speech-driven open-set grounding at desk scale, in plain numpy."""

from .checkpoint import Checkpoint, CheckpointError, load_checkpoint, save_checkpoint
from .data import ConceptVocabulary, SceneParams, SyntheticScene, eval_corpus, generate_scene
from .evaluation import EvalResult, evaluate
from .model import GroundingModel, ModelConfig
from .train import TrainConfig, finetune, pretrain, reference_config

__all__ = [
    "Checkpoint",
    "CheckpointError",
    "ConceptVocabulary",
    "EvalResult",
    "GroundingModel",
    "ModelConfig",
    "SceneParams",
    "SyntheticScene",
    "TrainConfig",
    "eval_corpus",
    "evaluate",
    "finetune",
    "generate_scene",
    "load_checkpoint",
    "pretrain",
    "reference_config",
    "save_checkpoint",
]

__version__ = "0.1.0"
