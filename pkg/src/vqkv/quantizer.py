"""Residual SimVQ quantizer: codebooks, greedy residual encoding, decoding.

Each stage owns raw entries ``q_1..q_S`` and a ``D x D`` projection ``W``.
Search and reconstruction both use the projected ("effective") entries
``W q``, which are computed once when a codebook is built or loaded.

Nearest-entry search ranks candidates with the expanded form
``|e|^2 - 2 x.e`` (one GEMM per entry block), then re-scores every entry that
lands within a rounding margin of the best one with the direct form
``sum((x - e)^2)``.  The direct form is evaluated per (row, entry) pair, so the
selected index never depends on how many rows were searched together.
"""

from __future__ import annotations

import enum
import hashlib
import io
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import bitpack
from .errors import FormatError, InvalidCodeError, InvalidInputError

RSVQ_MAGIC = b"RSVQ"
RSVQ_VERSION = 1
CODES_MAGIC = b"VQCM"
CODES_VERSION = 1

DEFAULT_BLOCK_SIZE = 4096

_EPS = np.finfo(np.float64).eps


class CacheKind(enum.IntEnum):
    KEY = 0
    VALUE = 1

    @classmethod
    def parse(cls, value) -> "CacheKind":
        if isinstance(value, cls):
            return value
        if isinstance(value, str):
            try:
                return cls[value.upper()]
            except KeyError:
                pass
        try:
            return cls(int(value))
        except (ValueError, TypeError):
            raise InvalidInputError(f"unknown cache kind {value!r}") from None


def _readonly(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Codebook:
    """One residual stage: ``S`` raw entries and a projection matrix.

    Parameters are held as float32 (the on-disk precision); effective entries
    are computed in float64.
    """

    entries: np.ndarray
    projection: np.ndarray
    effective_entries: np.ndarray = field(init=False, repr=False)
    _sq_norms: np.ndarray = field(init=False, repr=False)
    _distinct: np.ndarray | None = field(init=False, repr=False)

    def __post_init__(self):
        entries = np.array(self.entries, dtype=np.float32, copy=True)
        if entries.ndim != 2 or entries.shape[0] < 1 or entries.shape[1] < 1:
            raise InvalidInputError(f"entries must be a non-empty S x D matrix, got {entries.shape}")
        d = entries.shape[1]
        projection = np.array(self.projection, dtype=np.float32, copy=True)
        if projection.shape != (d, d):
            raise InvalidInputError(f"projection must be {d} x {d}, got {projection.shape}")
        if not (np.isfinite(entries).all() and np.isfinite(projection).all()):
            raise InvalidInputError("codebook parameters must be finite")
        effective = entries.astype(np.float64) @ projection.astype(np.float64).T
        object.__setattr__(self, "entries", _readonly(entries))
        object.__setattr__(self, "projection", _readonly(projection))
        object.__setattr__(self, "effective_entries", _readonly(effective))
        object.__setattr__(self, "_sq_norms", _readonly(np.einsum("ij,ij->i", effective, effective)))
        # first occurrence of each distinct effective entry; duplicates can never win a search
        first = np.sort(np.unique(effective, axis=0, return_index=True)[1])
        object.__setattr__(self, "_distinct", None if len(first) == len(effective) else _readonly(first))

    @property
    def size(self) -> int:
        return self.entries.shape[0]

    @property
    def dim(self) -> int:
        return self.entries.shape[1]

    def __eq__(self, other):
        if not isinstance(other, Codebook):
            return NotImplemented
        return (
            np.array_equal(self.entries, other.entries)
            and np.array_equal(self.projection, other.projection)
        )

    __hash__ = None


@dataclass(frozen=True, eq=False)
class CodebookStack:
    """Ordered residual stages for one cache kind (keys or values)."""

    stages: tuple
    cache_kind: CacheKind = CacheKind.KEY

    def __post_init__(self):
        stages = tuple(self.stages)
        if not stages:
            raise InvalidInputError("a stack needs at least one stage")
        if any(not isinstance(s, Codebook) for s in stages):
            raise InvalidInputError("stack stages must be Codebook instances")
        dims = {s.dim for s in stages}
        if len(dims) != 1:
            raise InvalidInputError(f"all stages must share one dimension, got {sorted(dims)}")
        object.__setattr__(self, "stages", stages)
        object.__setattr__(self, "cache_kind", CacheKind.parse(self.cache_kind))

    @property
    def dim(self) -> int:
        return self.stages[0].dim

    @property
    def n_stages(self) -> int:
        return len(self.stages)

    @property
    def sizes(self) -> tuple:
        return tuple(s.size for s in self.stages)

    @property
    def widths(self) -> tuple:
        return tuple(bitpack.bit_width(s) for s in self.sizes)

    @property
    def bits_per_vector(self) -> int:
        return sum(self.widths)

    def __len__(self):
        return len(self.stages)

    def __eq__(self, other):
        if not isinstance(other, CodebookStack):
            return NotImplemented
        return self.cache_kind == other.cache_kind and self.stages == other.stages

    __hash__ = None

    def truncated(self, n: int) -> "CodebookStack":
        """The stack made of the first ``n`` stages."""
        if not 1 <= n <= self.n_stages:
            raise InvalidInputError(f"cannot keep {n} of {self.n_stages} stages")
        return CodebookStack(self.stages[:n], self.cache_kind)

    # -- serialization -------------------------------------------------

    def to_bytes(self) -> bytes:
        buf = io.BytesIO()
        buf.write(RSVQ_MAGIC)
        buf.write(struct.pack("<IBI", RSVQ_VERSION, int(self.cache_kind), self.n_stages))
        for stage in self.stages:
            buf.write(struct.pack("<II", stage.size, stage.dim))
            buf.write(stage.entries.astype("<f4").tobytes())
            buf.write(stage.projection.astype("<f4").tobytes())
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, data: bytes) -> "CodebookStack":
        reader = _Reader(data)
        if reader.take(4) != RSVQ_MAGIC:
            raise FormatError("bad magic, expected 'RSVQ'", 0)
        version, kind, n = reader.unpack("<IBI")
        if version != RSVQ_VERSION:
            raise FormatError(f"unsupported RSVQ version {version}", 4)
        if kind not in (0, 1):
            raise FormatError(f"unknown cache kind {kind}", 8)
        if n < 1:
            raise FormatError("stack has zero stages", 9)
        stages = []
        for _ in range(n):
            at = reader.pos
            s, d = reader.unpack("<II")
            if s < 1 or d < 1:
                raise FormatError(f"invalid stage shape {s} x {d}", at)
            entries = reader.array("<f4", s * d).reshape(s, d)
            projection = reader.array("<f4", d * d).reshape(d, d)
            try:
                stages.append(Codebook(entries, projection))
            except InvalidInputError as exc:
                raise FormatError(str(exc), at) from None
        if reader.pos != len(data):
            raise FormatError("trailing bytes after last stage", reader.pos)
        try:
            return cls(tuple(stages), CacheKind(kind))
        except InvalidInputError as exc:
            raise FormatError(str(exc), 0) from None

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "CodebookStack":
        return cls.from_bytes(Path(path).read_bytes())

    def content_hash(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()

    @property
    def nbytes(self) -> int:
        """Serialized size in bytes, the fixed overhead of keeping this stack."""
        return 13 + sum(8 + 4 * (s.size * s.dim + s.dim * s.dim) for s in self.stages)


class CodeMatrix:
    """Append-only ``L x N`` matrix of stage indices.

    Codes are widened to int64 in memory; :meth:`pack` produces the persistent
    payload at ``ceil(log2 S_i)`` bits per index.
    """

    def __init__(self, sizes, codes=None):
        self.sizes = tuple(int(s) for s in sizes)
        if not self.sizes or min(self.sizes) < 1:
            raise InvalidInputError(f"invalid stage sizes {self.sizes}")
        self.widths = tuple(bitpack.bit_width(s) for s in self.sizes)
        self._buf = np.zeros((16, len(self.sizes)), dtype=np.int64)
        self._len = 0
        if codes is not None:
            self.append(codes)

    @classmethod
    def for_stack(cls, stack: CodebookStack, codes=None) -> "CodeMatrix":
        return cls(stack.sizes, codes)

    def __len__(self):
        return self._len

    @property
    def n_stages(self) -> int:
        return len(self.sizes)

    @property
    def codes(self) -> np.ndarray:
        view = self._buf[: self._len]
        view.setflags(write=False)
        return view

    def rows(self, begin: int, end: int) -> np.ndarray:
        if not 0 <= begin <= end <= self._len:
            raise InvalidInputError(f"row range [{begin}, {end}) outside [0, {self._len})")
        return self.codes[begin:end]

    def append(self, codes) -> None:
        codes = np.asarray(codes, dtype=np.int64)
        if codes.ndim == 1:
            codes = codes[None, :]
        if codes.ndim != 2 or codes.shape[1] != self.n_stages:
            raise InvalidInputError(f"expected rows of {self.n_stages} codes, got shape {codes.shape}")
        _check_codes(codes, self.sizes)
        need = self._len + codes.shape[0]
        if need > self._buf.shape[0]:
            grown = np.zeros((max(need, 2 * self._buf.shape[0]), self.n_stages), dtype=np.int64)
            grown[: self._len] = self._buf[: self._len]
            self._buf = grown
        self._buf[self._len:need] = codes
        self._len = need

    @property
    def payload_bits(self) -> int:
        return bitpack.packed_nbits(self._len, self.widths)

    def pack(self) -> bytes:
        return bitpack.pack(self.codes, self.widths)

    @classmethod
    def from_packed(cls, payload: bytes, rows: int, sizes) -> "CodeMatrix":
        cm = cls(sizes)
        cm.append(bitpack.unpack(payload, rows, cm.widths))
        return cm

    def __eq__(self, other):
        if not isinstance(other, CodeMatrix):
            return NotImplemented
        return self.sizes == other.sizes and np.array_equal(self.codes, other.codes)

    __hash__ = None

    def __repr__(self):
        return f"CodeMatrix(rows={self._len}, sizes={self.sizes})"

    def to_bytes(self) -> bytes:
        header = CODES_MAGIC + struct.pack("<IIQ", CODES_VERSION, self.n_stages, self._len)
        table = struct.pack(f"<{self.n_stages}I", *self.sizes)
        return header + table + self.pack()

    @classmethod
    def from_bytes(cls, data: bytes) -> "CodeMatrix":
        reader = _Reader(data)
        if reader.take(4) != CODES_MAGIC:
            raise FormatError("bad magic, expected 'VQCM'", 0)
        version, n, rows = reader.unpack("<IIQ")
        if version != CODES_VERSION:
            raise FormatError(f"unsupported code matrix version {version}", 4)
        if n < 1:
            raise FormatError("code matrix has zero stages", 8)
        at = reader.pos
        sizes = reader.unpack(f"<{n}I")
        if min(sizes) < 1:
            raise FormatError("stage size of zero", at)
        widths = [bitpack.bit_width(s) for s in sizes]
        nbytes = -(-rows * sum(widths) // 8)
        at = reader.pos
        payload = reader.take(nbytes)
        if reader.pos != len(data):
            raise FormatError("trailing bytes after payload", reader.pos)
        try:
            return cls.from_packed(payload, rows, sizes)
        except InvalidInputError as exc:
            raise FormatError(str(exc), at) from None

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "CodeMatrix":
        return cls.from_bytes(Path(path).read_bytes())


class _Reader:
    def __init__(self, data: bytes):
        self.data = memoryview(data)
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError(f"truncated file: wanted {n} bytes", self.pos)
        out = bytes(self.data[self.pos:self.pos + n])
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def array(self, dtype: str, count: int) -> np.ndarray:
        width = np.dtype(dtype).itemsize
        return np.frombuffer(self.take(width * count), dtype=dtype).copy()


def _check_codes(codes: np.ndarray, sizes) -> None:
    if codes.size == 0:
        return
    if codes.min() < 0 or (codes >= np.asarray(sizes)[None, :]).any():
        bad = np.argwhere((codes < 0) | (codes >= np.asarray(sizes)[None, :]))[0]
        raise InvalidCodeError(
            f"code {codes[tuple(bad)]} at row {bad[0]}, stage {bad[1]} "
            f"is outside codebook of size {sizes[bad[1]]}"
        )


def _as_rows(xs, dim: int) -> np.ndarray:
    xs = np.asarray(xs, dtype=np.float64)
    if xs.ndim != 2 or xs.shape[1] != dim:
        raise InvalidInputError(f"expected an L x {dim} matrix, got shape {xs.shape}")
    if not np.isfinite(xs).all():
        raise InvalidInputError("input vectors must be finite")
    return xs


def _as_vector(x, dim: int) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1 or x.shape[0] != dim:
        raise InvalidInputError(f"expected a vector of dimension {dim}, got shape {x.shape}")
    if not np.isfinite(x).all():
        raise InvalidInputError("input vector must be finite")
    return x


def _direct_sq_dist(rows: np.ndarray, entries: np.ndarray) -> np.ndarray:
    # One contiguous length-D reduction per pair; independent of batch shape.
    diff = rows - entries
    return np.square(diff).sum(axis=1)


def search(codebook: Codebook, xs: np.ndarray, block_size: int = DEFAULT_BLOCK_SIZE) -> np.ndarray:
    """Index of the nearest effective entry for every row of ``xs`` (float64, L x D).

    Ties go to the lowest index.  Distances are scored ``block_size`` entries
    at a time so the working matrix never exceeds ``L x block_size``.
    """
    keep = codebook._distinct
    if keep is None:
        return nearest_indices(codebook.effective_entries, xs, block_size, codebook._sq_norms)
    local = nearest_indices(codebook.effective_entries[keep], xs, block_size, codebook._sq_norms[keep])
    return keep[local]


def nearest_indices(eff: np.ndarray, xs: np.ndarray, block_size: int = DEFAULT_BLOCK_SIZE,
                    eff_sq: np.ndarray | None = None) -> np.ndarray:
    """:func:`search` over a bare float64 ``S x D`` entry matrix."""
    if block_size < 1:
        raise InvalidInputError(f"block_size must be >= 1, got {block_size}")
    if eff_sq is None:
        eff_sq = np.einsum("ij,ij->i", eff, eff)
    n_rows, d = xs.shape
    if n_rows == 0:
        return np.zeros(0, dtype=np.int64)
    x_sq = np.einsum("ij,ij->i", xs, xs)
    margin = 8.0 * (d + 4) * _EPS * (x_sq + 2.0 * eff_sq.max()) + 1e-300

    best = np.full(n_rows, np.inf)
    cand_r, cand_e, cand_v = [], [], []
    for start in range(0, eff.shape[0], block_size):
        stop = min(start + block_size, eff.shape[0])
        scores = eff_sq[None, start:stop] - 2.0 * (xs @ eff[start:stop].T)
        np.minimum(best, scores.min(axis=1), out=best)
        r, c = np.nonzero(scores <= (best + margin)[:, None])
        cand_r.append(r)
        cand_e.append(c + start)
        cand_v.append(scores[r, c])
    rows = np.concatenate(cand_r)
    ents = np.concatenate(cand_e)
    vals = np.concatenate(cand_v)
    keep = vals <= best[rows] + margin[rows]
    rows, ents = rows[keep], ents[keep]

    counts = np.bincount(rows, minlength=n_rows)
    out = np.empty(n_rows, dtype=np.int64)
    lone = counts[rows] == 1
    out[rows[lone]] = ents[lone]
    if not lone.all():
        rows, ents = rows[~lone], ents[~lone]
        exact = _direct_sq_dist(xs[rows], eff[ents])
        order = np.lexsort((ents, exact, rows))
        rows, ents = rows[order], ents[order]
        first = np.ones(len(rows), dtype=bool)
        first[1:] = rows[1:] != rows[:-1]
        out[rows[first]] = ents[first]
    return out


def encode(stack: CodebookStack, xs, block_size: int = DEFAULT_BLOCK_SIZE):
    """Greedy residual encoding of every row.

    Returns ``(codes, residuals)``: an ``L x N`` int64 matrix and the ``L x D``
    float64 residual left after the last stage.
    """
    residual = _as_rows(xs, stack.dim).copy()
    codes = np.empty((residual.shape[0], stack.n_stages), dtype=np.int64)
    for i, stage in enumerate(stack.stages):
        idx = search(stage, residual, block_size)
        codes[:, i] = idx
        residual -= stage.effective_entries[idx]
    return codes, residual


def decode(stack: CodebookStack, codes) -> np.ndarray:
    """Sum of the selected effective entries, stage by stage, for every row."""
    codes = np.asarray(codes, dtype=np.int64)
    if codes.ndim != 2 or codes.shape[1] != stack.n_stages:
        raise InvalidInputError(f"expected rows of {stack.n_stages} codes, got shape {codes.shape}")
    _check_codes(codes, stack.sizes)
    out = np.zeros((codes.shape[0], stack.dim), dtype=np.float64)
    for i, stage in enumerate(stack.stages):
        out += stage.effective_entries[codes[:, i]]
    return out


def nearest_entry(codebook: Codebook, x, block_size: int = DEFAULT_BLOCK_SIZE):
    """Return ``(index, distance)`` of the effective entry closest to ``x``."""
    x = _as_vector(x, codebook.dim)
    idx = int(search(codebook, x[None, :], block_size)[0])
    dist = float(np.sqrt(_direct_sq_dist(x[None, :], codebook.effective_entries[idx][None, :])[0]))
    return idx, dist


def quantize(stack: CodebookStack, x, block_size: int = DEFAULT_BLOCK_SIZE):
    """Encode one vector; returns ``(codes, final_residual)``."""
    x = _as_vector(x, stack.dim)
    codes, residual = encode(stack, x[None, :], block_size)
    return codes[0], residual[0]


def reconstruct(stack: CodebookStack, codes) -> np.ndarray:
    codes = np.asarray(codes, dtype=np.int64)
    if codes.shape != (stack.n_stages,):
        raise InvalidInputError(f"expected {stack.n_stages} codes, got shape {codes.shape}")
    return decode(stack, codes[None, :])[0]


def quantize_batch(stack: CodebookStack, xs, block_size: int = DEFAULT_BLOCK_SIZE):
    """Encode an ``L x D`` batch; returns ``(CodeMatrix, residual_norms)``."""
    codes, residual = encode(stack, xs, block_size)
    return CodeMatrix.for_stack(stack, codes), np.sqrt(np.square(residual).sum(axis=1))


def reconstruct_block(stack: CodebookStack, codes: CodeMatrix, begin: int, end: int) -> np.ndarray:
    """Reconstruct rows ``[begin, end)`` of ``codes`` only."""
    if codes.sizes != stack.sizes:
        raise InvalidInputError(f"code matrix sizes {codes.sizes} do not match stack {stack.sizes}")
    return decode(stack, codes.rows(begin, end))
