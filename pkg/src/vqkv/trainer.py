"""Codebook training: datasets, initialization, the VQ loss and SGD.

Following SimVQ, raw entries stay frozen at their random initialization and
only each stage's projection is learned (``train_entries`` unfreezes them).
Gradients pass straight through the nearest-entry selection.  Stage inputs
(the residuals) are treated as constants, so the commitment term, whose only
differentiable argument would be those inputs, is reported but never moves a
parameter.
"""

from __future__ import annotations

import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DivergedError, FormatError, InvalidInputError
from .quantizer import (
    DEFAULT_BLOCK_SIZE,
    CacheKind,
    Codebook,
    CodebookStack,
    nearest_indices,
)

log = logging.getLogger(__name__)

VECD_MAGIC = b"VECD"
VECD_VERSION = 1
_VECD_HEADER = struct.Struct("<4sIIQ")

DEFAULT_BATCH_SIZE = 65536
DESK_BATCH_SIZE = 1024
_F32_MAX = float(np.finfo(np.float32).max)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.001
    batch_size: int = DEFAULT_BATCH_SIZE
    epochs: int = 10
    beta: float = 0.25
    gamma: float = 1.0
    seed: int = 0
    init_scale: float = 1.0
    square_commitment: bool = False
    train_entries: bool = False
    holdout_fraction: float = 0.01
    block_size: int = DEFAULT_BLOCK_SIZE

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise InvalidInputError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.batch_size < 1:
            raise InvalidInputError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 0:
            raise InvalidInputError(f"epochs must be >= 0, got {self.epochs}")
        if self.beta < 0 or self.gamma < 0:
            raise InvalidInputError("beta and gamma must be non-negative")
        if self.init_scale < 0:
            raise InvalidInputError(f"init_scale must be >= 0, got {self.init_scale}")
        if not 0 <= self.holdout_fraction < 1:
            raise InvalidInputError("holdout_fraction must be in [0, 1)")

    def effective_batch_size(self, count: int) -> int:
        """Batch size actually used for a dataset of ``count`` vectors.

        The large default is replaced by a desk-scale one when the
        dataset could not fill ten such batches.
        """
        if self.batch_size == DEFAULT_BATCH_SIZE and count < 10 * DEFAULT_BATCH_SIZE:
            return DESK_BATCH_SIZE
        return self.batch_size


@dataclass
class TrainReport:
    per_epoch_loss: list = field(default_factory=list)
    per_stage_mse: list = field(default_factory=list)
    final_mse: float = float("nan")
    batch_size: int = 0
    train_count: int = 0
    holdout_count: int = 0

    def lines(self):
        """Report as key/value records, one per line."""
        for epoch, value in enumerate(self.per_epoch_loss):
            yield {"record": "epoch", "epoch": epoch, "loss": value}
        for stage, value in enumerate(self.per_stage_mse, start=1):
            yield {"record": "stage", "stage": stage, "mse": value}
        yield {
            "record": "summary",
            "final_mse": self.final_mse,
            "batch_size": self.batch_size,
            "train_count": self.train_count,
            "holdout_count": self.holdout_count,
        }


class VectorDataset:
    """``count x D`` float32 vectors, optionally memory-mapped from a VECD file."""

    def __init__(self, vectors):
        vectors = np.asarray(vectors)
        if vectors.ndim != 2 or vectors.shape[0] < 1 or vectors.shape[1] < 1:
            raise InvalidInputError(f"dataset must be a non-empty count x D matrix, got {vectors.shape}")
        if vectors.dtype != np.float32:
            vectors = vectors.astype(np.float32)
        self.vectors = vectors

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    @property
    def count(self) -> int:
        return self.vectors.shape[0]

    def __len__(self):
        return self.count

    def check_finite(self, chunk: int = 1 << 16) -> None:
        for start in range(0, self.count, chunk):
            if not np.isfinite(self.vectors[start:start + chunk]).all():
                raise InvalidInputError(f"non-finite value in rows starting at {start}")

    def to_bytes(self) -> bytes:
        header = _VECD_HEADER.pack(VECD_MAGIC, VECD_VERSION, self.dim, self.count)
        return header + np.ascontiguousarray(self.vectors, dtype="<f4").tobytes()

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(_VECD_HEADER.pack(VECD_MAGIC, VECD_VERSION, self.dim, self.count))
            for start in range(0, self.count, 1 << 16):
                fh.write(np.ascontiguousarray(self.vectors[start:start + (1 << 16)], dtype="<f4").tobytes())

    @classmethod
    def load(cls, path, mmap: bool = True) -> "VectorDataset":
        path = Path(path)
        size = path.stat().st_size
        with open(path, "rb") as fh:
            head = fh.read(_VECD_HEADER.size)
        dim, count = _parse_vecd_header(head, size)
        if mmap:
            vectors = np.memmap(path, dtype="<f4", mode="r", offset=_VECD_HEADER.size, shape=(count, dim))
        else:
            vectors = np.fromfile(path, dtype="<f4", offset=_VECD_HEADER.size).reshape(count, dim)
        return cls(vectors)

    @classmethod
    def from_bytes(cls, data: bytes) -> "VectorDataset":
        dim, count = _parse_vecd_header(data[:_VECD_HEADER.size], len(data))
        return cls(np.frombuffer(data, dtype="<f4", offset=_VECD_HEADER.size).reshape(count, dim))


def _parse_vecd_header(head: bytes, total: int):
    if len(head) < 4 or head[:4] != VECD_MAGIC:
        raise FormatError("bad magic, expected 'VECD'", 0)
    if len(head) < _VECD_HEADER.size:
        raise FormatError("truncated VECD header", len(head))
    _, version, dim, count = _VECD_HEADER.unpack(head)
    if version != VECD_VERSION:
        raise FormatError(f"unsupported VECD version {version}", 4)
    if dim < 1:
        raise FormatError("dimension must be >= 1", 8)
    if count < 1:
        raise FormatError("dataset is empty", 12)
    expected = _VECD_HEADER.size + 4 * dim * count
    if total != expected:
        raise FormatError(f"payload size mismatch: file has {total} bytes, header implies {expected}",
                          min(total, expected))
    return dim, count


def init_stack(dim: int, stage_sizes, config: TrainConfig = TrainConfig(),
               cache_kind=CacheKind.KEY) -> CodebookStack:
    """Gaussian entries scaled by ``init_scale``, identity projections."""
    stage_sizes = [int(s) for s in stage_sizes]
    if dim < 1:
        raise InvalidInputError(f"dimension must be >= 1, got {dim}")
    if not stage_sizes:
        raise InvalidInputError("need at least one stage")
    if min(stage_sizes) < 2:
        raise InvalidInputError(f"every stage needs at least 2 entries, got {stage_sizes}")
    rng = np.random.default_rng(config.seed)
    eye = np.eye(dim, dtype=np.float32)
    stages = tuple(
        Codebook(rng.standard_normal((s, dim)) * config.init_scale, eye) for s in stage_sizes
    )
    return CodebookStack(stages, cache_kind)


def _forward(effective, xs, block_size):
    """Greedy pass with bare float64 effective entries.

    Returns per-stage selected indices, per-stage incoming residuals and the
    final residual.
    """
    residual = xs.copy()
    picks, inputs = [], []
    for eff in effective:
        idx = nearest_indices(eff, residual, block_size)
        picks.append(idx)
        inputs.append(residual)
        residual = residual - eff[idx]
    return picks, inputs, residual


def _loss_terms(effective, picks, inputs, final, beta, gamma, square_commitment):
    recon = float(np.mean(np.square(final).sum(axis=1)))
    pull = 0.0
    commit = 0.0
    for eff, idx, r in zip(effective, picks, inputs):
        sq = np.square(eff[idx] - r).sum(axis=1)
        pull += float(np.mean(sq))
        commit += float(np.mean(sq if square_commitment else np.sqrt(sq)))
    return recon, beta * pull, gamma * commit


def loss(stack: CodebookStack, batch, beta: float = 0.25, gamma: float = 1.0,
         square_commitment: bool = False):
    """Value of the training objective on ``batch``.

    Returns ``(total, (recon, codebook_pull, commitment))`` with the weights
    already applied to the last two terms.
    """
    xs = np.asarray(batch, dtype=np.float64)
    if xs.ndim != 2 or xs.shape[1] != stack.dim:
        raise InvalidInputError(f"expected a B x {stack.dim} batch, got shape {xs.shape}")
    if xs.shape[0] == 0:
        raise InvalidInputError("batch is empty")
    effective = [s.effective_entries for s in stack.stages]
    picks, inputs, final = _forward(effective, xs, DEFAULT_BLOCK_SIZE)
    terms = _loss_terms(effective, picks, inputs, final, beta, gamma, square_commitment)
    return sum(terms), terms


def holdout_split(count: int, fraction: float, seed: int):
    """Deterministic ``(train_rows, holdout_rows)`` index split.

    When the held-out share rounds to zero rows, evaluation falls back to the
    full dataset and both index arrays cover every row.
    """
    n_hold = int(math.floor(count * fraction))
    everything = np.arange(count)
    if n_hold == 0:
        return everything, everything
    perm = np.random.default_rng([seed, 0x5EED]).permutation(count)
    return np.sort(perm[n_hold:]), np.sort(perm[:n_hold])


def stage_mse(stack: CodebookStack, xs, block_size: int = DEFAULT_BLOCK_SIZE) -> list:
    """Mean squared residual norm after each stage, on ``xs``."""
    residual = np.asarray(xs, dtype=np.float64).copy()
    out = []
    for stage in stack.stages:
        residual -= stage.effective_entries[nearest_indices(
            stage.effective_entries, residual, block_size, stage._sq_norms)]
        out.append(float(np.mean(np.square(residual).sum(axis=1))))
    return out


def gradients(entries, projections, xs, config: TrainConfig):
    """Loss value and straight-through gradients for one batch.

    ``entries``/``projections`` are per-stage float64 arrays.  Returns
    ``(loss, projection_grads, entry_grads)``; entry gradients are None unless
    ``config.train_entries`` is set.
    """
    n = xs.shape[0]
    effective = [q @ w.T for q, w in zip(entries, projections)]
    picks, inputs, final = _forward(effective, xs, config.block_size)
    value = sum(_loss_terms(effective, picks, inputs, final, config.beta,
                            config.gamma, config.square_commitment))
    # gradient w.r.t. each selected effective entry; the recon part is shared by all stages
    recon_grad = -2.0 * final / n
    w_grads, q_grads = [], []
    for q, w, eff, idx, r in zip(entries, projections, effective, picks, inputs):
        grad = recon_grad + (2.0 * config.beta / n) * (eff[idx] - r)
        w_grads.append(grad.T @ q[idx])
        if config.train_entries:
            q_grad = np.zeros_like(q)
            np.add.at(q_grad, idx, grad @ w)
            q_grads.append(q_grad)
        else:
            q_grads.append(None)
    return value, w_grads, q_grads


def _gather(vectors, rows):
    return np.asarray(vectors[rows], dtype=np.float64)


def train(dataset: VectorDataset, stage_sizes, config: TrainConfig = TrainConfig(),
          cache_kind=CacheKind.KEY, progress=None):
    """Train a stack with mini-batch SGD; returns ``(stack, TrainReport)``.

    ``progress``, if given, is called as ``progress(epoch, loss)`` after every
    epoch.
    """
    if not isinstance(dataset, VectorDataset):
        dataset = VectorDataset(dataset)
    dataset.check_finite()
    stack = init_stack(dataset.dim, stage_sizes, config, cache_kind)

    train_rows, hold_rows = holdout_split(dataset.count, config.holdout_fraction, config.seed)
    batch_size = min(config.effective_batch_size(dataset.count), len(train_rows))
    report = TrainReport(batch_size=batch_size, train_count=len(train_rows),
                         holdout_count=len(hold_rows))

    entries = [s.entries.astype(np.float64) for s in stack.stages]
    projections = [s.projection.astype(np.float64) for s in stack.stages]
    lr = config.learning_rate
    rng = np.random.default_rng([config.seed, 0xBA7C4])

    for epoch in range(config.epochs):
        order = train_rows[rng.permutation(len(train_rows))]
        total, seen = 0.0, 0
        for start in range(0, len(order), batch_size):
            rows = np.sort(order[start:start + batch_size])
            xs = _gather(dataset.vectors, rows)
            n = xs.shape[0]
            value, w_grads, q_grads = gradients(entries, projections, xs, config)
            if not math.isfinite(value):
                raise DivergedError(epoch, value)
            total += value * n
            seen += n
            for i in range(len(projections)):
                projections[i] -= lr * w_grads[i]
                if config.train_entries:
                    entries[i] -= lr * q_grads[i]
        epoch_loss = total / seen
        report.per_epoch_loss.append(epoch_loss)
        log.debug("epoch %d loss %.6g", epoch, epoch_loss)
        if progress is not None:
            progress(epoch, epoch_loss)
        if not all(np.isfinite(p).all() and np.abs(p).max() < _F32_MAX for p in projections + entries):
            raise DivergedError(epoch, float("nan"))

    trained = CodebookStack(
        tuple(Codebook(q, w) for q, w in zip(entries, projections)), stack.cache_kind
    )
    report.per_stage_mse = stage_mse(trained, _gather(dataset.vectors, hold_rows), config.block_size)
    report.final_mse = report.per_stage_mse[-1]
    return trained, report

