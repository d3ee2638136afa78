"""Parameter initializers."""

from __future__ import annotations

import math

import numpy as np

from .tensor import Tensor


def glorot_bound(fan_in: int, fan_out: int) -> float:
    return math.sqrt(6.0 / (fan_in + fan_out))


def glorot_init(shape, fan_in: int, fan_out: int, rng: np.random.Generator, name: str | None = None) -> Tensor:
    """Uniform Glorot/Xavier draw on ``[-sqrt(6/(fan_in+fan_out)), +...]``."""
    if fan_in <= 0 or fan_out <= 0:
        raise ValueError(f"fans must be positive, got fan_in={fan_in}, fan_out={fan_out}")
    limit = glorot_bound(fan_in, fan_out)
    return Tensor(rng.uniform(-limit, limit, size=shape), requires_grad=True, name=name)


def conv_fans(c_in: int, d: int, k: int = 3) -> tuple[int, int]:
    return k * k * c_in, k * k * d


def zeros(shape, name: str | None = None) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True, name=name)


def ones(shape, name: str | None = None) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=True, name=name)
