"""Synthetic stand-ins for dumped KV-cache vectors."""

from __future__ import annotations

import enum
from dataclasses import dataclass, replace

import numpy as np

from .errors import InvalidInputError
from .trainer import VectorDataset


class SyntheticKind(str, enum.Enum):
    GAUSSIAN_MIXTURE = "gaussian_mixture"
    ROPE_ROTATED_KEYS = "rope_rotated_keys"


@dataclass(frozen=True)
class SyntheticSpec:
    """Generator settings.

    Mixture components have means drawn from ``N(0, mean_scale^2 I)`` and
    isotropic spread ``noise_scale``.  ``rope_rotated_keys`` draws the same
    mixture and then rotates row ``p`` as a key at position ``p``.
    """

    kind: SyntheticKind = SyntheticKind.GAUSSIAN_MIXTURE
    dim: int = 64
    count: int = 10_000
    component_count: int = 32
    seed: int = 0
    rope_base: float = 10000.0
    mean_scale: float = 1.0
    noise_scale: float = 0.25
    position_offset: int = 0

    def __post_init__(self):
        object.__setattr__(self, "kind", SyntheticKind(self.kind))
        if self.dim < 1 or self.count < 1 or self.component_count < 1:
            raise InvalidInputError("dim, count and component_count must be >= 1")
        if self.kind is SyntheticKind.ROPE_ROTATED_KEYS and self.dim % 2:
            raise InvalidInputError(f"rotary keys need an even dimension, got {self.dim}")
        if not self.rope_base > 0:
            raise InvalidInputError(f"rope_base must be > 0, got {self.rope_base}")
        if self.mean_scale < 0 or self.noise_scale < 0:
            raise InvalidInputError("mean_scale and noise_scale must be non-negative")

    def with_seed(self, seed: int) -> "SyntheticSpec":
        return replace(self, seed=seed)


def rope_frequencies(dim: int, base: float = 10000.0) -> np.ndarray:
    return base ** (-np.arange(0, dim, 2, dtype=np.float64) / dim)


def rope_rotate(xs, positions, base: float = 10000.0) -> np.ndarray:
    """Rotate interleaved pairs ``(x[2i], x[2i+1])`` by ``pos * base^(-2i/D)``."""
    xs = np.asarray(xs, dtype=np.float64)
    if xs.ndim != 2 or xs.shape[1] % 2:
        raise InvalidInputError(f"expected an L x D matrix with even D, got {xs.shape}")
    positions = np.asarray(positions, dtype=np.float64)
    angles = positions[:, None] * rope_frequencies(xs.shape[1], base)[None, :]
    cos, sin = np.cos(angles), np.sin(angles)
    even, odd = xs[:, 0::2], xs[:, 1::2]
    out = np.empty_like(xs)
    out[:, 0::2] = even * cos - odd * sin
    out[:, 1::2] = even * sin + odd * cos
    return out


def mixture(spec: SyntheticSpec) -> np.ndarray:
    rng = np.random.default_rng(spec.seed)
    means = rng.standard_normal((spec.component_count, spec.dim)) * spec.mean_scale
    labels = rng.integers(0, spec.component_count, size=spec.count)
    return means[labels] + rng.standard_normal((spec.count, spec.dim)) * spec.noise_scale


def generate(spec: SyntheticSpec, prerotation: bool = False):
    """float32 ``count x dim`` vectors for ``spec``.

    With ``prerotation`` the unrotated draw is returned alongside (identical
    to the output for mixture data).
    """
    base = mixture(spec)
    if spec.kind is SyntheticKind.ROPE_ROTATED_KEYS:
        positions = spec.position_offset + np.arange(spec.count)
        out = rope_rotate(base, positions, spec.rope_base)
    else:
        out = base
    out = out.astype(np.float32)
    if prerotation:
        return out, base
    return out


def gen_dataset(spec: SyntheticSpec, out_path) -> VectorDataset:
    dataset = VectorDataset(generate(spec))
    dataset.save(out_path)
    return dataset
