"""Rebuild any saved model from its checkpoint, whatever its kind."""
from __future__ import annotations

from . import checkpoint
from .baselines import GlobalHeadClassifier, PromptPoolClassifier
from .errors import CheckpointFormatError
from .model import CliffModel

MODEL_KINDS = {
    "cliff": CliffModel,
    GlobalHeadClassifier.kind: GlobalHeadClassifier,
    PromptPoolClassifier.kind: PromptPoolClassifier,
}


def load_model(path):
    metadata, tensors = checkpoint.read(path)
    kind = metadata.get("kind")
    if kind not in MODEL_KINDS:
        raise CheckpointFormatError(f"{path}: unknown model kind {kind!r}")
    return MODEL_KINDS[kind].from_state(metadata, tensors)
