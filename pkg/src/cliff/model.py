"""The CLIFF classifier: frozen base head plus per-material residual heads.

For material ``i`` the global logit block is ``b(x) + D_i([z, e_i])`` where
``b`` is the base head on unprompted features, ``z`` the prompted backbone
feature, and ``e_i`` the material's embedding.  Prediction is the argmax over
all ``C * M`` global logits, decoded as ``(index % C, index // C)``.
"""
from __future__ import annotations

import copy
from dataclasses import asdict, dataclass

import numpy as np

from . import checkpoint
from .errors import CheckpointFormatError, ParameterError, RegistrationError
from .nn import Linear, Module, normal_param, zeros_param
from .synth import NUM_CLASSES
from .tensor import Tensor, concat, no_grad
from .vit import Prompt, VisionTransformer, VitConfig

PER_MATERIAL = "per_material_prompt"
SINGLE = "single_prompt"
MODES = (PER_MATERIAL, SINGLE)


@dataclass
class HeadConfig:
    num_classes: int = NUM_CLASSES
    prompt_length: int = 4
    material_dim: int = 32
    delta_hidden: int | None = None  # defaults to the backbone width
    init_std: float = 0.02

    def __post_init__(self):
        if self.prompt_length < 1:
            raise ParameterError("prompt_length must be at least 1")
        if self.material_dim < 1:
            raise ParameterError("material_dim must be at least 1")


class BaseHead(Linear):
    """g_phi: linear map from backbone features to C thickness logits."""


class DeltaHead(Module):
    """Two-layer GELU MLP on [z, e_i]; the output layer starts at zero."""

    def __init__(self, in_features: int, hidden: int, classes: int, rng: np.random.Generator):
        self.fc1 = Linear(in_features, hidden, rng)
        self.fc2 = Linear(hidden, classes, rng)
        self.fc2.weight.data[...] = 0.0

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(self.fc1(x).gelu())


class MaterialEmbeddingTable(Module):
    """Embedding rows stored separately so each can be frozen on its own."""

    def __init__(self, dim: int):
        self.rows: list[Tensor] = []
        self._dim = dim

    @property
    def dim(self) -> int:
        return self._dim

    def __len__(self) -> int:
        return len(self.rows)

    def add(self, rng: np.random.Generator, std: float = 0.02) -> Tensor:
        row = normal_param(rng, (self._dim,), std)
        self.rows.append(row)
        return row

    def table(self) -> Tensor:
        return concat([r.reshape(1, -1) for r in self.rows], axis=0)


class CliffModel(Module):
    def __init__(self, vit_config: VitConfig | None = None, head_config: HeadConfig | None = None, seed: int = 0):
        self.vit_config = vit_config or VitConfig()
        self.head_config = head_config or HeadConfig()
        self._seed = int(seed)
        self._rng = np.random.default_rng(self._seed)
        d = self.vit_config.embed_dim
        self.backbone = VisionTransformer(self.vit_config, self._rng)
        self.base_head = BaseHead(d, self.head_config.num_classes, self._rng)
        self.prompts: list[Prompt] = []
        self.embeddings = MaterialEmbeddingTable(self.head_config.material_dim)
        self.delta_heads: list[DeltaHead] = []
        self.gate_projections: list[Linear] = []
        self.material_names: list[str] = []

    # -- structure ---------------------------------------------------------
    @property
    def num_classes(self) -> int:
        return self.head_config.num_classes

    @property
    def num_materials(self) -> int:
        return len(self.material_names)

    @property
    def delta_hidden(self) -> int:
        return self.head_config.delta_hidden or self.vit_config.embed_dim

    def material_parameters(self, i: int) -> list[Tensor]:
        return (
            self.prompts[i].parameters()
            + [self.embeddings.rows[i]]
            + self.delta_heads[i].parameters()
            + self.gate_projections[i].parameters()
        )

    def freeze_base(self) -> None:
        self.backbone.freeze()
        self.base_head.freeze()

    def add_material(self, name: str) -> int:
        """Register a material with fresh prompt, embedding and delta head.

        Every previously registered material is frozen.  Returns the new index.
        """
        if name in self.material_names:
            raise RegistrationError(f"material {name!r} is already registered")
        for i in range(self.num_materials):
            for p in self.material_parameters(i):
                p.freeze()
        m = self.num_materials
        cfg, d = self.head_config, self.vit_config.embed_dim
        self.prompts.append(Prompt(cfg.prompt_length, d, m, self._rng, cfg.init_std))
        self.embeddings.add(self._rng, cfg.init_std)
        self.delta_heads.append(DeltaHead(d + cfg.material_dim, self.delta_hidden, cfg.num_classes, self._rng))
        self.gate_projections.append(Linear(d, cfg.material_dim, self._rng))
        self.material_names.append(name)
        return m

    # -- forward pieces ----------------------------------------------------
    def features(self, x, i: int | None = None) -> Tensor:
        """Backbone feature, prompted with material ``i``'s prompt if given."""
        return self.backbone(x, None if i is None else self.prompts[i])

    def base_logits(self, x) -> Tensor:
        return self.base_head(self.backbone(x))

    def delta(self, x, i: int, z: Tensor | None = None) -> Tensor:
        if not 0 <= i < self.num_materials:
            raise IndexError(f"material index {i} out of range for {self.num_materials} materials")
        if z is None:
            z = self.features(x, i)
        e = self.embeddings.rows[i]
        if z.ndim == 2:
            e = e.reshape(1, -1).broadcast_to((z.shape[0], e.shape[0]))
        return self.delta_heads[i](concat([z, e], axis=-1))

    def global_logits(
        self, x, mode: str = PER_MATERIAL, index: int | None = None, base: Tensor | None = None
    ) -> Tensor:
        """Concatenated corrected logits, block ``i`` at ``[C*i, C*i + C)``.

        ``per_material_prompt`` runs one prompted pass per material and feeds
        each block its own material's feature.  ``single_prompt`` runs one pass
        with prompt ``index`` and feeds that feature to every block.
        """
        if self.num_materials < 1:
            raise ParameterError("global logits need at least one registered material")
        if mode not in MODES:
            raise ParameterError(f"unknown logit mode {mode!r}; expected one of {MODES}")
        if base is None:
            base = self.base_logits(x)
        if mode == SINGLE:
            if index is None or not 0 <= index < self.num_materials:
                raise ParameterError(f"single_prompt mode needs a material index, got {index}")
            z = self.features(x, index)
            blocks = [base + self.delta(x, i, z) for i in range(self.num_materials)]
        else:
            blocks = [base + self.delta(x, i) for i in range(self.num_materials)]
        return concat(blocks, axis=-1)

    def predict(self, x, mode: str = PER_MATERIAL, batch_size: int = 64) -> tuple[np.ndarray, np.ndarray]:
        """(thickness class, material index) per image; ties go to the lowest index."""
        logits = self.predict_logits(x, mode, batch_size)
        k = np.argmax(logits, axis=-1)
        return k % self.num_classes, k // self.num_classes

    def predict_logits(self, x, mode: str = PER_MATERIAL, batch_size: int = 64) -> np.ndarray:
        x = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float32)
        single = x.ndim == 3
        x = x[None] if single else x
        index = self.num_materials - 1 if mode == SINGLE else None
        with no_grad():
            out = np.concatenate(
                [self.global_logits(x[s:s + batch_size], mode, index).data for s in range(0, len(x), batch_size)]
            )
        return out[0] if single else out

    def snapshot(self) -> "CliffModel":
        """Frozen deep copy used as the distillation teacher."""
        teacher = copy.deepcopy(self)
        teacher.freeze()
        return teacher

    # -- persistence ---------------------------------------------------------
    def metadata(self) -> dict:
        return {
            "kind": "cliff",
            "vit_config": self.vit_config.to_dict(),
            "head_config": asdict(self.head_config),
            "seed": self._seed,
            "material_names": list(self.material_names),
            "trainable": {name: p.requires_grad for name, p in self.named_parameters()},
        }

    def save_checkpoint(self, path) -> None:
        tensors = [(name, p.data) for name, p in self.named_parameters()]
        checkpoint.write(path, self.metadata(), tensors)

    @classmethod
    def from_state(cls, metadata: dict, tensors: dict[str, np.ndarray]) -> "CliffModel":
        if metadata.get("kind") != "cliff":
            raise CheckpointFormatError(f"checkpoint holds a {metadata.get('kind')!r} model, not 'cliff'")
        model = cls(VitConfig(**metadata["vit_config"]), HeadConfig(**metadata["head_config"]), metadata["seed"])
        for name in metadata["material_names"]:
            model.add_material(name)
        model.load_state_dict(tensors)
        flags = metadata["trainable"]
        for name, p in model.named_parameters():
            p.requires_grad = bool(flags[name])
        return model

    @classmethod
    def load_checkpoint(cls, path) -> "CliffModel":
        return cls.from_state(*checkpoint.read(path))
