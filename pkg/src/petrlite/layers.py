"""Parameter containers and the few layer types the detector is built from."""

from __future__ import annotations

import math
import zlib
from typing import Iterator

import numpy as np

from . import diffarray as da
from .diffarray import DiffArray, parameter
from .errors import DimensionError


def make_rng(seed: int, tag: str) -> np.random.Generator:
    """Generator keyed by (seed, tag) so a sub-module initializes the same way
    regardless of which other sub-modules exist in the model."""
    return np.random.default_rng([int(seed) & 0xFFFFFFFF, zlib.crc32(tag.encode())])


class Module:
    """Walks attributes to find parameters; insertion order defines naming order."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, DiffArray]]:
        for key, val in vars(self).items():
            if isinstance(val, DiffArray):
                if val.requires_grad:
                    yield prefix + key, val
            elif isinstance(val, Module):
                yield from val.named_parameters(f"{prefix}{key}.")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{key}.{i}.")

    def parameters(self) -> list[DiffArray]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        missing = params.keys() - state.keys()
        extra = state.keys() - params.keys()
        if missing or extra:
            raise DimensionError(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for name, p in params.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.shape:
                raise DimensionError(f"{name}: checkpoint shape {arr.shape} vs model {p.shape}")
            p.data[...] = arr


class Linear(Module):
    """``y = x @ w + b`` with Xavier-uniform weights and zero bias."""

    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, bias: bool = True,
                 gain: float = 1.0):
        bound = gain * math.sqrt(6.0 / (n_in + n_out))
        self.w = parameter(rng.uniform(-bound, bound, size=(n_in, n_out)))
        self.b = parameter(np.zeros(n_out)) if bias else None

    def __call__(self, x) -> DiffArray:
        return da.linear(x, self.w, self.b)


class Conv2d(Module):
    def __init__(self, c_in: int, c_out: int, kernel: int, stride: int, rng: np.random.Generator,
                 padding: int = 0):
        fan_in = c_in * kernel * kernel
        self.w = parameter(rng.normal(0.0, math.sqrt(2.0 / fan_in), size=(c_out, c_in, kernel, kernel)))
        self.b = parameter(np.zeros(c_out))
        self.stride = stride
        self.padding = padding

    def __call__(self, x) -> DiffArray:
        return da.conv2d(x, self.w, self.b, stride=self.stride, padding=self.padding)


class LayerNorm(Module):
    def __init__(self, c: int):
        self.gamma = parameter(np.ones(c))
        self.beta = parameter(np.zeros(c))

    def __call__(self, x) -> DiffArray:
        return da.layernorm(x, self.gamma, self.beta)
