"""Material-incremental flake thickness classification on a numpy ViT.

A frozen backbone and base head are learned on a reference material; every
later material adds a prompt, an embedding and a zero-initialised residual
head, trained with replay and distillation.  Baselines, a synthetic
microscopy benchmark and the evaluation protocol live alongside.
"""
from .baselines import GlobalHeadClassifier, PromptPoolClassifier
from .errors import CliffError
from .loading import load_model
from .metrics import EvalMatrix, avg_accuracy, evaluate_sequence, evaluate_step, forgetting, render_comparison
from .model import CliffModel, HeadConfig
from .synth import MaterialProfile, default_benchmark, load_dataset, save_dataset
from .training import TRAINERS, CliffTrainer, TrainConfig, run_cliff
from .vit import VisionTransformer, VitConfig

__version__ = "0.1.0"

__all__ = [
    "CliffError",
    "CliffModel",
    "CliffTrainer",
    "EvalMatrix",
    "GlobalHeadClassifier",
    "HeadConfig",
    "MaterialProfile",
    "PromptPoolClassifier",
    "TRAINERS",
    "TrainConfig",
    "VisionTransformer",
    "VitConfig",
    "avg_accuracy",
    "default_benchmark",
    "evaluate_sequence",
    "evaluate_step",
    "forgetting",
    "load_dataset",
    "load_model",
    "render_comparison",
    "run_cliff",
    "save_dataset",
]
