"""Parameter containers and the dense layers shared by the encoders."""

from __future__ import annotations

import zlib
from typing import Iterator

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


def param_rng(seed: int, path: str) -> np.random.Generator:
    """Independent stream per parameter path, so one shape change never shifts another."""
    return np.random.default_rng([seed, zlib.crc32(path.encode())])


def uniform_param(rng: np.random.Generator, shape, bound: float) -> Tensor:
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


def fan_in_param(rng: np.random.Generator, shape, fan_in: int) -> Tensor:
    return uniform_param(rng, shape, 1.0 / np.sqrt(fan_in))


class Module:
    """Collects parameter tensors and child modules from attributes, torch style.

    Lists of modules are walked too; their children are named ``attr.<i>``.
    """

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, value in vars(self).items():
            if key.startswith("_"):
                continue
            path = f"{prefix}{key}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield path, value
            elif isinstance(value, Module):
                yield from value.named_parameters(path + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{path}.{i}.")
                    elif isinstance(item, Tensor) and item.requires_grad:
                        yield f"{path}.{i}", item

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


class Linear(Module):
    """``x @ weight + bias`` on the last axis."""

    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator, bias: bool = True):
        self.weight = fan_in_param(rng, (in_dim, out_dim), in_dim)
        self.bias = fan_in_param(rng, (out_dim,), in_dim) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        if x.ndim == 1:
            return self(x.reshape(1, x.shape[0])).reshape(-1)
        y = ad.matmul(x, self.weight)
        return y if self.bias is None else y + self.bias
