"""Binary masks over a K x L observation: 0 marks a masked value, 1 a kept one."""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .errors import ConfigError, ShapeError


class Strategy(str, Enum):
    RANDM = "RandM"
    RANDBM = "RandBM"
    BOM = "BoM"

    @classmethod
    def parse(cls, value):
        if isinstance(value, cls):
            return value
        for s in cls:
            if s.value.lower() == str(value).lower():
                return s
        raise ConfigError(f"unknown masking strategy {value!r}; expected RandM, RandBM or BoM")


class MaskSpecError(ConfigError):
    pass


@dataclass(frozen=True)
class MaskSpec:
    strategy: Strategy
    r: int

    def __post_init__(self):
        object.__setattr__(self, "strategy", Strategy.parse(self.strategy))
        if int(self.r) != self.r or self.r < 1:
            raise MaskSpecError(f"mask width r must be a positive integer, got {self.r}")

    def check(self, L):
        if self.strategy is Strategy.RANDM:
            if self.r > L:
                raise MaskSpecError(f"r={self.r} exceeds sequence length {L}")
        elif L // self.r == 0:
            raise MaskSpecError(f"no full segment of width {self.r} fits in length {L}")

    def n_segments(self, L):
        return L // self.r


@dataclass(frozen=True)
class Mask:
    v: np.ndarray
    spec: MaskSpec

    @property
    def shape(self):
        return self.v.shape


def make_mask(spec: MaskSpec, K: int, L: int, rng: np.random.Generator) -> Mask:
    spec.check(L)
    v = np.ones((K, L))
    r = spec.r
    if spec.strategy is Strategy.RANDM:
        # independent draws per variable
        for k in range(K):
            v[k, rng.choice(L, size=r, replace=False)] = 0.0
    elif spec.strategy is Strategy.RANDBM:
        segs = rng.integers(0, L // r, size=K)
        for k, s in enumerate(segs):
            v[k, s * r:(s + 1) * r] = 0.0
    else:
        s = int(rng.integers(0, L // r))
        v[:, s * r:(s + 1) * r] = 0.0
    return Mask(v, spec)


def make_masks(spec: MaskSpec, n: int, K: int, L: int, rng: np.random.Generator) -> np.ndarray:
    """Stack of ``n`` independent masks, shape (n, K, L)."""
    if n == 0:
        return np.ones((0, K, L))
    return np.stack([make_mask(spec, K, L, rng).v for _ in range(n)])


def apply_mask(x, v):
    x = np.asarray(x, dtype=np.float64)
    v = v.v if isinstance(v, Mask) else np.asarray(v, dtype=np.float64)
    if x.shape != v.shape:
        raise ShapeError(f"observation shape {x.shape} != mask shape {v.shape}")
    return x * v
