"""A tiny pre-norm Vision Transformer with optional prepended prompt tokens."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .errors import DimensionError, ParameterError
from .nn import LayerNorm, Linear, Module, normal_param
from .tensor import DTYPE, Tensor, as_tensor, concat


@dataclass
class VitConfig:
    image_size: int = 32
    patch_size: int = 8
    embed_dim: int = 64
    depth: int = 2
    heads: int = 4
    mlp_ratio: float = 2.0
    channels: int = 3

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ParameterError(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if self.embed_dim % self.heads:
            raise ParameterError(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")
        if self.depth < 1:
            raise ParameterError("depth must be at least 1")

    @property
    def num_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def patch_dim(self) -> int:
        return self.channels * self.patch_size ** 2

    def to_dict(self) -> dict:
        return asdict(self)


class Prompt(Module):
    """Learnable tokens for one material, each with its own position embedding."""

    def __init__(self, length: int, dim: int, material_id: int, rng: np.random.Generator, std: float = 0.02):
        if length < 1:
            raise ParameterError("prompt length must be at least 1")
        self.tokens = normal_param(rng, (length, dim), std)
        self.position = normal_param(rng, (length, dim), std)
        self._material_id = material_id

    @property
    def material_id(self) -> int:
        return self._material_id

    @property
    def length(self) -> int:
        return self.tokens.shape[0]

    def sequence(self) -> Tensor:
        return self.tokens + self.position


class Attention(Module):
    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        self.qkv = Linear(dim, 3 * dim, rng)
        self.proj = Linear(dim, dim, rng)
        self._heads = heads
        self._last_weights: np.ndarray | None = None

    def forward(self, x: Tensor) -> Tensor:
        b, t, d = x.shape
        h = self._heads
        qkv = self.qkv(x).reshape(b, t, 3, h, d // h).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        scores = (q @ k.transpose()).scale(1.0 / math.sqrt(d // h))
        weights = scores.softmax(-1)
        self._last_weights = weights.data
        mixed = (weights @ v).permute(0, 2, 1, 3).reshape(b, t, d)
        return self.proj(mixed)


class Block(Module):
    def __init__(self, dim: int, heads: int, mlp_ratio: float, rng: np.random.Generator):
        hidden = int(dim * mlp_ratio)
        self.norm1 = LayerNorm(dim)
        self.attn = Attention(dim, heads, rng)
        self.norm2 = LayerNorm(dim)
        self.fc1 = Linear(dim, hidden, rng)
        self.fc2 = Linear(hidden, dim, rng)

    def forward(self, x: Tensor) -> Tensor:
        x = x + self.attn(self.norm1(x))
        return x + self.fc2(self.fc1(self.norm2(x)).gelu())


def patchify(images: np.ndarray, patch: int) -> np.ndarray:
    """[B, C, H, W] -> [B, num_patches, C*patch*patch], row-major patch order."""
    b, c, hgt, wid = images.shape
    gh, gw = hgt // patch, wid // patch
    x = images.reshape(b, c, gh, patch, gw, patch).transpose(0, 2, 4, 1, 3, 5)
    return x.reshape(b, gh * gw, c * patch * patch)


class VisionTransformer(Module):
    """Backbone f(x; P): CLS readout of a pre-norm transformer.

    ``forward`` accepts a single image ``[3, H, W]`` (returns ``[d]``) or a
    batch ``[B, 3, H, W]`` (returns ``[B, d]``).  The prompt may be a
    :class:`Prompt`, a ``[L, d]`` tensor shared across the batch, or a
    ``[B, L, d]`` tensor of per-image tokens.
    """

    def __init__(self, config: VitConfig, rng: np.random.Generator):
        self.config = config
        d = config.embed_dim
        self.patch_proj = Linear(config.patch_dim, d, rng)
        self.cls_token = normal_param(rng, (1, d))
        self.position = normal_param(rng, (1 + config.num_patches, d))
        self.blocks = [Block(d, config.heads, config.mlp_ratio, rng) for _ in range(config.depth)]
        self.norm = LayerNorm(d)

    def _check_images(self, images) -> tuple[np.ndarray, bool]:
        arr = images.data if isinstance(images, Tensor) else np.asarray(images, dtype=DTYPE)
        single = arr.ndim == 3
        if single:
            arr = arr[None]
        cfg = self.config
        expected = (cfg.channels, cfg.image_size, cfg.image_size)
        if arr.ndim != 4 or arr.shape[1:] != expected:
            raise DimensionError(f"expected image shape {expected} (optionally batched), got {tuple(np.shape(arr))}")
        return arr, single

    def patch_embed(self, images) -> Tensor:
        """Project non-overlapping patches and add their position embeddings."""
        arr, single = self._check_images(images)
        patches = Tensor(patchify(arr, self.config.patch_size))
        tokens = self.patch_proj(patches) + self.position[1:]
        return tokens[0] if single else tokens

    def token_sequence(self, images, prompt=None) -> Tensor:
        arr, _ = self._check_images(images)
        b = arr.shape[0]
        d = self.config.embed_dim
        patches = self.patch_embed(arr)
        cls = (self.cls_token + self.position[:1]).reshape(1, 1, d).broadcast_to((b, 1, d))
        parts = [cls]
        if prompt is not None:
            seq = prompt.sequence() if isinstance(prompt, Prompt) else as_tensor(prompt)
            if seq.shape[-1] != d:
                raise DimensionError(f"prompt token dim {seq.shape[-1]} != embed dim {d}")
            if seq.ndim == 2:
                seq = seq.reshape(1, *seq.shape).broadcast_to((b,) + seq.shape)
            elif seq.ndim != 3 or seq.shape[0] != b:
                raise DimensionError(f"prompt shape {seq.shape} incompatible with batch of {b}")
            parts.append(seq)
        parts.append(patches)
        return concat(parts, axis=1)

    def forward(self, images, prompt=None) -> Tensor:
        _, single = self._check_images(images)
        x = self.token_sequence(images, prompt)
        for block in self.blocks:
            x = block(x)
        z = self.norm(x[:, 0])
        return z[0] if single else z

    def attention_maps(self) -> list[np.ndarray]:
        """Attention weights recorded during the most recent forward pass."""
        return [blk.attn._last_weights for blk in self.blocks]
