"""Comparison models: a plain growing-head classifier and a prompt-pool model."""
from __future__ import annotations

import copy

import numpy as np

from . import checkpoint
from .errors import CheckpointFormatError, RegistrationError
from .nn import Linear, Module, normal_param
from .synth import NUM_CLASSES
from .tensor import Tensor, concat, cosine_similarity, no_grad
from .vit import VisionTransformer, VitConfig


class _GrowingHeadMixin:
    """One C-way linear block per material, concatenated into global logits."""

    def add_material(self, name: str) -> int:
        if name in self.material_names:
            raise RegistrationError(f"material {name!r} is already registered")
        self.head_blocks.append(Linear(self.vit_config.embed_dim, self.num_classes, self._rng))
        self.material_names.append(name)
        return len(self.material_names) - 1

    @property
    def num_materials(self) -> int:
        return len(self.material_names)

    def head(self, z: Tensor) -> Tensor:
        return concat([blk(z) for blk in self.head_blocks], axis=-1)

    def predict_logits(self, x, batch_size: int = 64) -> np.ndarray:
        x = np.asarray(x, dtype=np.float32)
        with no_grad():
            return np.concatenate([self.global_logits(x[s:s + batch_size]).data for s in range(0, len(x), batch_size)])

    def predict(self, x, batch_size: int = 64) -> tuple[np.ndarray, np.ndarray]:
        k = np.argmax(self.predict_logits(x, batch_size), axis=-1)
        return k % self.num_classes, k // self.num_classes

    def save_checkpoint(self, path) -> None:
        checkpoint.write(path, self.metadata(), [(n, p.data) for n, p in self.named_parameters()])

    def _restore(self, metadata: dict, tensors: dict) -> None:
        for name in metadata["material_names"]:
            self.add_material(name)
        self.load_state_dict(tensors)
        for name, p in self.named_parameters():
            p.requires_grad = bool(metadata["trainable"][name])


class GlobalHeadClassifier(_GrowingHeadMixin, Module):
    """Backbone plus a growing C*M-way linear head; used for naive and joint training."""

    kind = "global_head"

    def __init__(self, vit_config: VitConfig | None = None, num_classes: int = NUM_CLASSES, seed: int = 0):
        self.vit_config = vit_config or VitConfig()
        self.num_classes = num_classes
        self._seed = int(seed)
        self._rng = np.random.default_rng(self._seed)
        self.backbone = VisionTransformer(self.vit_config, self._rng)
        self.head_blocks: list[Linear] = []
        self.material_names: list[str] = []

    def global_logits(self, x) -> Tensor:
        return self.head(self.backbone(x))

    def metadata(self) -> dict:
        return {
            "kind": self.kind,
            "vit_config": self.vit_config.to_dict(),
            "num_classes": self.num_classes,
            "seed": self._seed,
            "material_names": list(self.material_names),
            "trainable": {n: p.requires_grad for n, p in self.named_parameters()},
        }

    @classmethod
    def from_state(cls, metadata: dict, tensors: dict) -> "GlobalHeadClassifier":
        if metadata.get("kind") != cls.kind:
            raise CheckpointFormatError(f"checkpoint holds a {metadata.get('kind')!r} model, not {cls.kind!r}")
        model = cls(VitConfig(**metadata["vit_config"]), metadata["num_classes"], metadata["seed"])
        model._restore(metadata, tensors)
        return model


class PromptPoolClassifier(_GrowingHeadMixin, Module):
    """Frozen backbone steered by prompts picked from one shared keyed pool.

    Each image queries the pool with its unprompted CLS feature; the ``top_k``
    keys with the highest cosine similarity select the prompts that get
    prepended.  A growing linear head reads the prompted feature.
    """

    kind = "prompt_pool"

    def __init__(
        self,
        backbone: VisionTransformer,
        pool_size: int = 8,
        top_k: int = 2,
        prompt_length: int = 4,
        num_classes: int = NUM_CLASSES,
        seed: int = 0,
    ):
        self.vit_config = backbone.config
        self.num_classes = num_classes
        self._seed = int(seed)
        self._rng = np.random.default_rng(self._seed)
        self._top_k = top_k
        d = self.vit_config.embed_dim
        self.backbone = copy.deepcopy(backbone)
        self.backbone.freeze()
        self.keys = Tensor(self._rng.uniform(-1, 1, (pool_size, d)).astype(np.float32), requires_grad=True)
        self.prompts = normal_param(self._rng, (pool_size, prompt_length, d))
        self.head_blocks: list[Linear] = []
        self.material_names: list[str] = []

    @property
    def top_k(self) -> int:
        return self._top_k

    def select(self, x) -> tuple[np.ndarray, Tensor, np.ndarray]:
        """Indices of the chosen prompts ``[B, k]``, key similarities ``[B, pool]``, query."""
        with no_grad():
            query = self.backbone(x).data
        sims = cosine_similarity(Tensor(query[:, None, :]), self.keys[None])
        order = np.argsort(-sims.data, axis=1, kind="stable")
        return order[:, : self._top_k], sims, query

    def forward_features(self, x) -> tuple[Tensor, Tensor, np.ndarray]:
        x = np.asarray(x, dtype=np.float32)
        idx, sims, _ = self.select(x)
        b = x.shape[0]
        chosen = self.prompts[idx]  # [B, k, L, d]
        seq = chosen.reshape(b, -1, self.vit_config.embed_dim)
        return self.backbone(x, seq), sims, idx

    def key_pull(self, sims: Tensor, idx: np.ndarray) -> Tensor:
        rows = np.repeat(np.arange(idx.shape[0]), idx.shape[1])
        return 1.0 - sims[rows, idx.reshape(-1)].mean()

    def global_logits(self, x) -> Tensor:
        z, _, _ = self.forward_features(x)
        return self.head(z)

    def metadata(self) -> dict:
        return {
            "kind": self.kind,
            "vit_config": self.vit_config.to_dict(),
            "num_classes": self.num_classes,
            "seed": self._seed,
            "pool_size": int(self.keys.shape[0]),
            "top_k": self._top_k,
            "prompt_length": int(self.prompts.shape[1]),
            "material_names": list(self.material_names),
            "trainable": {n: p.requires_grad for n, p in self.named_parameters()},
        }

    @classmethod
    def from_state(cls, metadata: dict, tensors: dict) -> "PromptPoolClassifier":
        if metadata.get("kind") != cls.kind:
            raise CheckpointFormatError(f"checkpoint holds a {metadata.get('kind')!r} model, not {cls.kind!r}")
        backbone = VisionTransformer(VitConfig(**metadata["vit_config"]), np.random.default_rng(0))
        model = cls(
            backbone,
            metadata["pool_size"],
            metadata["top_k"],
            metadata["prompt_length"],
            metadata["num_classes"],
            metadata["seed"],
        )
        model._restore(metadata, tensors)
        return model
