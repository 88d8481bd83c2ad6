"""Blockwise reference attention over a compressed cache, plus fidelity metrics.

Attention streams over the cache ``block_rows`` rows at a time with the
online-softmax recurrence (running max, running normalizer, running weighted
sum), reconstructing only the rows of the current block.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .cache import CacheState
from .errors import InvalidInputError, InvalidStateError


@dataclass(frozen=True)
class AttentionConfig:
    block_rows: int = 128
    scale: float | None = None  # None -> 1/sqrt(D)
    causal: bool = True

    def __post_init__(self):
        if self.block_rows < 1:
            raise InvalidInputError(f"block_rows must be >= 1, got {self.block_rows}")

    def scale_for(self, dim: int) -> float:
        return 1.0 / math.sqrt(dim) if self.scale is None else float(self.scale)


@dataclass
class AttentionStats:
    """Working-set counters filled in by :func:`attend`."""

    blocks: int = 0
    peak_rows: int = 0
    peak_scalars: int = 0

    def observe(self, rows: int, dim: int) -> None:
        self.blocks += 1
        self.peak_rows = max(self.peak_rows, rows)
        self.peak_scalars = max(self.peak_scalars, rows * dim)


@dataclass
class FidelityReport:
    output_max_abs_err: float
    output_cosine: float
    output_min_cosine: float
    key_mse: float
    value_mse: float
    queries: int

    def as_record(self) -> dict:
        return asdict(self)


def _stream(fetch, total: int, query: np.ndarray, dim_v: int, config: AttentionConfig, stats):
    scale = config.scale_for(query.shape[0])
    running_max = -np.inf
    norm = 0.0
    acc = np.zeros(dim_v)
    for start in range(0, total, config.block_rows):
        stop = min(start + config.block_rows, total)
        keys, values = fetch(start, stop)
        if stats is not None:
            stats.observe(stop - start, max(keys.shape[1], values.shape[1]))
        logits = scale * (keys @ query)
        new_max = max(running_max, float(logits.max()))
        rescale = math.exp(running_max - new_max) if running_max != -np.inf else 0.0
        weights = np.exp(logits - new_max)
        norm = norm * rescale + float(weights.sum())
        acc = acc * rescale + weights @ values
        running_max = new_max
    return acc / norm


def attend(state: CacheState, query, config: AttentionConfig = AttentionConfig(),
           stats: AttentionStats | None = None) -> np.ndarray:
    """``softmax(scale * q K^T) V`` over every row held in ``state``."""
    if state.total_len < 1:
        raise InvalidStateError("cannot attend over an empty cache")
    dk, dv = state.dims
    query = np.asarray(query, dtype=np.float64)
    if query.shape != (dk,):
        raise InvalidInputError(f"query must have dimension {dk}, got shape {query.shape}")

    def fetch(a, b):
        keys, values, _ = state.view_block(a, b)
        return keys, values

    return _stream(fetch, state.total_len, query, dv, config, stats)


def attend_raw(keys, values, query, config: AttentionConfig = AttentionConfig(),
               stats: AttentionStats | None = None) -> np.ndarray:
    """Same streaming attention over plain ``L x D`` arrays."""
    keys = np.asarray(keys, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    query = np.asarray(query, dtype=np.float64)
    if keys.ndim != 2 or values.ndim != 2 or keys.shape[0] != values.shape[0]:
        raise InvalidInputError("keys and values must be matrices with equal row counts")
    if keys.shape[0] < 1:
        raise InvalidStateError("cannot attend over an empty cache")
    if query.shape != (keys.shape[1],):
        raise InvalidInputError(f"query must have dimension {keys.shape[1]}, got shape {query.shape}")
    return _stream(lambda a, b: (keys[a:b], values[a:b]), keys.shape[0], query,
                   values.shape[1], config, stats)


def cosine(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 and nb == 0.0:
        return 1.0
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def fidelity(state: CacheState, originals, queries,
             config: AttentionConfig = AttentionConfig()) -> FidelityReport:
    """Compare attention over ``state`` with attention over the raw ``originals``."""
    keys, values = (np.asarray(a, dtype=np.float32) for a in originals)
    if keys.shape[0] != state.total_len or values.shape[0] != state.total_len:
        raise InvalidInputError(
            f"originals have {keys.shape[0]}/{values.shape[0]} rows, cache holds {state.total_len}")
    if keys.shape[1:] != (state.dims[0],) or values.shape[1:] != (state.dims[1],):
        raise InvalidInputError("original dimensions do not match the cache")
    queries = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    if queries.shape[0] < 1:
        raise InvalidInputError("need at least one query")

    max_err, cosines = 0.0, []
    for q in queries:
        approx = attend(state, q, config)
        exact = attend_raw(keys, values, q, config)
        max_err = max(max_err, float(np.abs(approx - exact).max()))
        cosines.append(cosine(approx, exact))

    lo, hi = state.segment_bounds()["intermediate"]
    key_mse = value_mse = 0.0
    for start in range(lo, hi, config.block_rows):
        stop = min(start + config.block_rows, hi)
        k_hat, v_hat, _ = state.view_block(start, stop)
        key_mse += float(np.square(k_hat - keys[start:stop]).sum())
        value_mse += float(np.square(v_hat - values[start:stop]).sum())
    if hi > lo:
        key_mse /= hi - lo
        value_mse /= hi - lo
    return FidelityReport(
        output_max_abs_err=max_err,
        output_cosine=float(np.mean(cosines)),
        output_min_cosine=float(np.min(cosines)),
        key_mse=key_mse,
        value_mse=value_mse,
        queries=len(cosines),
    )
