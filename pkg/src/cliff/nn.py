"""Parameter containers built on :mod:`cliff.tensor`."""
from __future__ import annotations

from typing import Iterator

import numpy as np

from .errors import DimensionError
from .tensor import DTYPE, Tensor, layer_norm


def normal_param(rng: np.random.Generator, shape, std: float = 0.02) -> Tensor:
    return Tensor(rng.normal(0.0, std, size=shape).astype(DTYPE), requires_grad=True)


def zeros_param(shape) -> Tensor:
    return Tensor(np.zeros(shape, dtype=DTYPE), requires_grad=True)


def ones_param(shape) -> Tensor:
    return Tensor(np.ones(shape, dtype=DTYPE), requires_grad=True)


def _walk(value, prefix: str) -> Iterator[tuple[str, Tensor]]:
    if isinstance(value, Tensor):
        yield prefix, value
    elif isinstance(value, Module):
        yield from value.named_parameters(prefix + ".")
    elif isinstance(value, (list, tuple)):
        for i, item in enumerate(value):
            yield from _walk(item, f"{prefix}.{i}")


class Module:
    """Collects every Tensor attribute (recursively) as a parameter.

    Attributes whose names start with an underscore are skipped, which is how
    caches and non-parameter arrays stay out of checkpoints and optimizers.
    """

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            yield from _walk(value, prefix + name)

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def trainable_parameters(self) -> list[Tensor]:
        return [p for p in self.parameters() if p.requires_grad]

    def freeze(self) -> None:
        for p in self.parameters():
            p.freeze()

    def unfreeze(self) -> None:
        for p in self.parameters():
            p.unfreeze()

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def parameter_count(self) -> dict[str, int]:
        trainable = sum(p.size for p in self.parameters() if p.requires_grad)
        total = sum(p.size for p in self.parameters())
        return {"trainable": trainable, "frozen": total - trainable, "total": total}

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        if missing:
            raise KeyError(f"missing parameters: {sorted(missing)}")
        for name, p in own.items():
            value = np.asarray(state[name], dtype=DTYPE)
            if value.shape != p.shape:
                raise DimensionError(f"{name}: stored shape {value.shape} != parameter shape {p.shape}")
            p.data = value.copy()

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class Linear(Module):
    """y = x W^T + b with W stored as [out, in]."""

    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator, std: float = 0.02, bias=True):
        self.weight = normal_param(rng, (out_features, in_features), std)
        self.bias = zeros_param((out_features,)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        y = x @ self.weight.T
        return y + self.bias if self.bias is not None else y


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.weight = ones_param((dim,))
        self.bias = zeros_param((dim,))
        self._eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.weight, self.bias, self._eps)
