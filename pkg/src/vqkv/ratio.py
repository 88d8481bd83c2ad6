"""Compression-ratio accounting for codebook configurations."""

from __future__ import annotations

import math
from decimal import ROUND_HALF_UP, Decimal
from dataclasses import dataclass

from .errors import InvalidInputError

RAW_BITS_PER_SCALAR = 16

# (N_k, S_k, N_v, S_v) combinations from the codebook ablation on an 8B model, head dim 128.
ABLATION_GRID = (
    (56, 1024, 16, 128),
    (56, 1024, 16, 512),
    (56, 1024, 16, 2048),
    (56, 1024, 16, 8192),
    (56, 1024, 16, 32768),
    (56, 1024, 8, 512),
    (56, 1024, 16, 512),
    (56, 1024, 40, 512),
    (56, 64, 16, 512),
    (56, 256, 16, 512),
    (56, 1024, 16, 512),
    (56, 4096, 16, 512),
    (56, 8192, 16, 512),
    (8, 1024, 16, 512),
    (24, 1024, 16, 512),
    (40, 1024, 16, 512),
    (56, 1024, 16, 512),
    (72, 1024, 16, 512),
)


@dataclass(frozen=True)
class RatioConfig:
    n_k: int
    s_k: int
    n_v: int
    s_v: int
    d_k: int = 128
    d_v: int = 128

    def __post_init__(self):
        for name in ("n_k", "n_v", "d_k", "d_v"):
            if getattr(self, name) < 1:
                raise InvalidInputError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.s_k < 2 or self.s_v < 2:
            raise InvalidInputError(f"codebook sizes must be >= 2, got {self.s_k}, {self.s_v}")

    @property
    def code_bits(self) -> float:
        """Index bits per (key, value) token pair, at log2 S bits per index."""
        return self.n_k * math.log2(self.s_k) + self.n_v * math.log2(self.s_v)

    @property
    def raw_bits(self) -> int:
        return RAW_BITS_PER_SCALAR * (self.d_k + self.d_v)


def ratio(config: RatioConfig) -> float:
    """Share of raw 16-bit cache storage removed by compression, in percent."""
    return (1.0 - config.code_bits / config.raw_bits) * 100.0


def round_ratio(value: float, digits: int = 1) -> float:
    """Round half away from zero, as ratio tables are usually printed (81.25 -> 81.3)."""
    return float(Decimal(repr(value)).quantize(Decimal(1).scaleb(-digits), rounding=ROUND_HALF_UP))


def format_ratio(value: float, digits: int = 1) -> str:
    return f"{round_ratio(value, digits):.{digits}f}%"
