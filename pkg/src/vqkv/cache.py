"""Segmented KV cache: raw initial tokens, compressed middle, raw local window.

Token order is ``init | intermediate | pending | local``.  ``pending`` holds
rows already pushed out of the local window but not yet quantized; with the
default batched policy they are quantized together once ``l_local`` of them
have accumulated.  Until then they are served raw.
"""

from __future__ import annotations

import hashlib
import io
import struct
from dataclasses import dataclass, fields

import numpy as np

from .errors import FormatError, InvalidInputError, InvalidStateError
from .quantizer import CodebookStack, CodeMatrix, encode, reconstruct_block

SNAPSHOT_MAGIC = b"VQKS"
SNAPSHOT_VERSION = 1
_SNAP_HEADER = struct.Struct("<4sIIIBQIIIQIIQQ32s32s")

RAW_BYTES_PER_SCALAR = 2  # fp16-equivalent accounting


@dataclass(frozen=True)
class WindowPolicy:
    l_init: int = 4
    l_local: int = 1024
    batched: bool = True

    def __post_init__(self):
        if self.l_init < 0:
            raise InvalidInputError(f"l_init must be >= 0, got {self.l_init}")
        if self.l_local < 1:
            raise InvalidInputError(f"l_local must be >= 1, got {self.l_local}")


@dataclass
class MemoryReport:
    raw_bytes_equivalent: int = 0
    compressed_payload_bits: int = 0
    codebook_overhead_bytes: int = 0
    raw_segment_bytes: int = 0
    intermediate_rows: int = 0
    intermediate_raw_bits: int = 0
    effective_ratio: float = 0.0
    amortized_ratio: float = 0.0

    @property
    def footprint_bytes(self) -> int:
        """Bytes actually held: raw segments, packed codes and codebooks."""
        return self.raw_segment_bytes + -(-self.compressed_payload_bits // 8) + self.codebook_overhead_bytes

    def as_record(self) -> dict:
        rec = {f.name: getattr(self, f.name) for f in fields(self)}
        rec["footprint_bytes"] = self.footprint_bytes
        return rec


def _ratios(payload_bits, raw_bits, overhead_bytes):
    if raw_bits == 0:
        return 0.0, 0.0
    return 1.0 - payload_bits / raw_bits, 1.0 - (payload_bits + 8 * overhead_bytes) / raw_bits


def aggregate_reports(reports) -> MemoryReport:
    """Sum per-stream reports (one per layer/head) into one."""
    out = MemoryReport()
    for r in reports:
        for name in ("raw_bytes_equivalent", "compressed_payload_bits", "codebook_overhead_bytes",
                     "raw_segment_bytes", "intermediate_rows", "intermediate_raw_bits"):
            setattr(out, name, getattr(out, name) + getattr(r, name))
    out.effective_ratio, out.amortized_ratio = _ratios(
        out.compressed_payload_bits, out.intermediate_raw_bits, out.codebook_overhead_bytes)
    return out


class _Ring:
    """Fixed-capacity FIFO of row vectors."""

    def __init__(self, capacity: int, dim: int):
        self.buf = np.zeros((capacity, dim), dtype=np.float32)
        self.start = 0
        self.count = 0

    @property
    def capacity(self) -> int:
        return self.buf.shape[0]

    def push(self, row):
        """Append ``row``; returns the evicted oldest row when full, else None."""
        if self.count < self.capacity:
            self.buf[(self.start + self.count) % self.capacity] = row
            self.count += 1
            return None
        old = self.buf[self.start].copy()
        self.buf[self.start] = row
        self.start = (self.start + 1) % self.capacity
        return old

    def extend(self, rows):
        for row in rows:
            self.push(row)

    def ordered(self, begin: int = 0, end: int | None = None) -> np.ndarray:
        end = self.count if end is None else end
        idx = (self.start + np.arange(begin, end)) % self.capacity
        return self.buf[idx]

    def clear(self):
        self.start = self.count = 0


class _Stream:
    """Per-kind storage; both kinds of a CacheState always hold the same row counts."""

    def __init__(self, stack: CodebookStack, policy: WindowPolicy):
        self.stack = stack
        self.init = np.zeros((policy.l_init, stack.dim), dtype=np.float32)
        self.codes = CodeMatrix.for_stack(stack)
        self.residual_norms = np.zeros(0)
        self.pending = np.zeros((policy.l_local, stack.dim), dtype=np.float32)
        self.local = _Ring(policy.l_local, stack.dim)

    def compress(self, rows, block_size):
        codes, residual = encode(self.stack, rows, block_size)
        self.codes.append(codes)
        self.residual_norms = np.concatenate([self.residual_norms, np.sqrt(np.square(residual).sum(axis=1))])


class CacheState:
    """Compressed cache for one (layer, head) stream.

    Mutated in place by :func:`prefill` and :func:`append_token`; a single
    writer at a time.
    """

    def __init__(self, key_stack: CodebookStack, value_stack: CodebookStack,
                 policy: WindowPolicy = WindowPolicy(), block_size: int = 4096):
        self.policy = policy
        self.block_size = block_size
        self.keys = _Stream(key_stack, policy)
        self.values = _Stream(value_stack, policy)
        self.n_init = 0
        self.n_pending = 0
        self.total_len = 0
        self.prefill_compressions = 0
        self.decode_compressions = 0
        self.decode_rows_compressed = 0
        self.evictions = 0

    @property
    def key_stack(self) -> CodebookStack:
        return self.keys.stack

    @property
    def value_stack(self) -> CodebookStack:
        return self.values.stack

    @property
    def dims(self):
        return self.key_stack.dim, self.value_stack.dim

    @property
    def n_intermediate(self) -> int:
        return len(self.keys.codes)

    @property
    def n_local(self) -> int:
        return self.keys.local.count

    def segment_lengths(self) -> dict:
        return {
            "init": self.n_init,
            "intermediate": self.n_intermediate,
            "pending": self.n_pending,
            "local": self.n_local,
        }

    def segment_bounds(self) -> dict:
        bounds, at = {}, 0
        for name, n in self.segment_lengths().items():
            bounds[name] = (at, at + n)
            at += n
        return bounds

    def check_accounting(self) -> None:
        if sum(self.segment_lengths().values()) != self.total_len:
            raise AssertionError(f"segments {self.segment_lengths()} do not sum to {self.total_len}")

    @property
    def is_empty(self) -> bool:
        return self.total_len == 0

    def _streams(self):
        return (self.keys, self.values)

    # -- writes --------------------------------------------------------

    def prefill(self, keys, values) -> "CacheState":
        if not self.is_empty:
            raise InvalidStateError("prefill requires an empty cache")
        keys, values = self._check_pair(keys, values, batch=True)
        n = keys.shape[0]
        if n < 1:
            raise InvalidInputError("prefill needs at least one token")
        n_init = min(n, self.policy.l_init)
        n_local = min(self.policy.l_local, n - n_init)
        middle = slice(n_init, n - n_local)
        for stream, rows in zip(self._streams(), (keys, values)):
            stream.init[:n_init] = rows[:n_init]
            if middle.stop > middle.start:
                stream.compress(rows[middle], self.block_size)
            stream.local.extend(rows[n - n_local:])
        if middle.stop > middle.start:
            self.prefill_compressions += 1
        self.n_init = n_init
        self.total_len = n
        return self

    def append_token(self, key, value) -> "CacheState":
        key, value = self._check_pair(key, value, batch=False)
        if self.n_init < self.policy.l_init:
            # initial positions are kept raw; only reachable while nothing follows them
            for stream, row in zip(self._streams(), (key, value)):
                stream.init[self.n_init] = row
            self.n_init += 1
            self.total_len += 1
            return self
        evicted = [stream.local.push(row) for stream, row in zip(self._streams(), (key, value))]
        self.total_len += 1
        if evicted[0] is None:
            return self
        self.evictions += 1
        if not self.policy.batched:
            for stream, row in zip(self._streams(), evicted):
                stream.compress(row[None, :], self.block_size)
            self.decode_compressions += 1
            self.decode_rows_compressed += 1
            return self
        for stream, row in zip(self._streams(), evicted):
            stream.pending[self.n_pending] = row
        self.n_pending += 1
        if self.n_pending == self.policy.l_local:
            self.flush_pending()
        return self

    def flush_pending(self) -> None:
        """Quantize every pending row now, in one batch."""
        if self.n_pending == 0:
            return
        for stream in self._streams():
            stream.compress(stream.pending[: self.n_pending], self.block_size)
        self.decode_compressions += 1
        self.decode_rows_compressed += self.n_pending
        self.n_pending = 0

    def _check_pair(self, key, value, batch: bool):
        dk, dv = self.dims
        key = np.asarray(key, dtype=np.float32)
        value = np.asarray(value, dtype=np.float32)
        ndim = 2 if batch else 1
        if key.ndim != ndim or value.ndim != ndim:
            raise InvalidInputError(f"expected {'matrices' if batch else 'vectors'} of keys and values")
        if key.shape[-1] != dk or value.shape[-1] != dv:
            raise InvalidInputError(
                f"key/value dims {key.shape[-1]}/{value.shape[-1]} do not match stacks {dk}/{dv}")
        if batch and key.shape[0] != value.shape[0]:
            raise InvalidInputError(f"{key.shape[0]} keys but {value.shape[0]} values")
        if not (np.isfinite(key).all() and np.isfinite(value).all()):
            raise InvalidInputError("cache vectors must be finite")
        return key, value

    # -- reads ---------------------------------------------------------

    def view_block(self, begin: int, end: int):
        """Rows ``[begin, end)`` in token order as ``(keys, values, exact)``.

        Raw rows come back unchanged; intermediate rows are reconstructed and
        flagged inexact.
        """
        if not 0 <= begin <= end <= self.total_len:
            raise InvalidInputError(f"row range [{begin}, {end}) outside [0, {self.total_len})")
        dk, dv = self.dims
        n = end - begin
        keys = np.empty((n, dk))
        values = np.empty((n, dv))
        exact = np.ones(n, dtype=bool)
        for name, (lo, hi) in self.segment_bounds().items():
            a, b = max(begin, lo), min(end, hi)
            if a >= b:
                continue
            out = slice(a - begin, b - begin)
            s, e = a - lo, b - lo
            for stream, dest in ((self.keys, keys), (self.values, values)):
                if name == "init":
                    dest[out] = stream.init[s:e]
                elif name == "intermediate":
                    dest[out] = reconstruct_block(stream.stack, stream.codes, s, e)
                elif name == "pending":
                    dest[out] = stream.pending[s:e]
                else:
                    dest[out] = stream.local.ordered(s, e)
            if name == "intermediate":
                exact[out] = False
        return keys, values, exact

    def memory_report(self) -> MemoryReport:
        dk, dv = self.dims
        raw_rows = self.n_init + self.n_pending + self.n_local
        payload = self.keys.codes.payload_bits + self.values.codes.payload_bits
        inter_raw_bits = 8 * RAW_BYTES_PER_SCALAR * self.n_intermediate * (dk + dv)
        # stacks only cost anything once some row depends on them
        overhead = self.key_stack.nbytes + self.value_stack.nbytes if self.n_intermediate else 0
        effective, amortized = _ratios(payload, inter_raw_bits, overhead)
        return MemoryReport(
            raw_bytes_equivalent=RAW_BYTES_PER_SCALAR * self.total_len * (dk + dv),
            compressed_payload_bits=payload,
            codebook_overhead_bytes=overhead,
            raw_segment_bytes=RAW_BYTES_PER_SCALAR * raw_rows * (dk + dv),
            intermediate_rows=self.n_intermediate,
            intermediate_raw_bits=inter_raw_bits,
            effective_ratio=effective,
            amortized_ratio=amortized,
        )

    # -- snapshots -----------------------------------------------------

    def to_bytes(self) -> bytes:
        """Serialize; stacks are referenced by the SHA-256 of their RSVQ bytes."""
        dk, dv = self.dims
        buf = io.BytesIO()
        buf.write(_SNAP_HEADER.pack(
            SNAPSHOT_MAGIC, SNAPSHOT_VERSION, self.policy.l_init, self.policy.l_local,
            int(self.policy.batched), self.total_len, dk, dv, self.n_init, self.n_intermediate,
            self.n_pending, self.n_local, self.prefill_compressions, self.decode_compressions,
            hashlib.sha256(self.key_stack.to_bytes()).digest(),
            hashlib.sha256(self.value_stack.to_bytes()).digest(),
        ))
        for stream in self._streams():
            for rows in (stream.init[: self.n_init], stream.pending[: self.n_pending],
                         stream.local.ordered()):
                buf.write(np.ascontiguousarray(rows, dtype="<f4").tobytes())
            payload = stream.codes.pack()
            buf.write(struct.pack("<I", stream.codes.n_stages))
            buf.write(struct.pack(f"<{stream.codes.n_stages}I", *stream.codes.sizes))
            buf.write(struct.pack("<Q", len(payload)))
            buf.write(payload)
        return buf.getvalue()

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def from_bytes(cls, data: bytes, key_stack: CodebookStack, value_stack: CodebookStack,
                   block_size: int = 4096) -> "CacheState":
        if len(data) < _SNAP_HEADER.size:
            raise FormatError("truncated snapshot header", len(data))
        (magic, version, l_init, l_local, batched, total, dk, dv, n_init, n_inter, n_pending,
         n_local, pre_c, dec_c, key_hash, value_hash) = _SNAP_HEADER.unpack_from(data)
        if magic != SNAPSHOT_MAGIC:
            raise FormatError("bad magic, expected 'VQKS'", 0)
        if version != SNAPSHOT_VERSION:
            raise FormatError(f"unsupported snapshot version {version}", 4)
        if hashlib.sha256(key_stack.to_bytes()).digest() != key_hash:
            raise FormatError("key stack does not match the snapshot's content hash", _SNAP_HEADER.size - 64)
        if hashlib.sha256(value_stack.to_bytes()).digest() != value_hash:
            raise FormatError("value stack does not match the snapshot's content hash", _SNAP_HEADER.size - 32)
        if (dk, dv) != (key_stack.dim, value_stack.dim):
            raise FormatError(f"snapshot dims {dk}/{dv} do not match stacks", 29)
        if n_init + n_inter + n_pending + n_local != total or n_init > l_init \
                or n_local > l_local or n_pending > l_local:
            raise FormatError("inconsistent segment lengths", 37)
        try:
            state = cls(key_stack, value_stack, WindowPolicy(l_init, l_local, bool(batched)), block_size)
        except InvalidInputError as exc:
            raise FormatError(str(exc), 8) from None
        pos = _SNAP_HEADER.size
        for stream in state._streams():
            d = stream.stack.dim
            segments = []
            for n in (n_init, n_pending, n_local):
                nbytes = 4 * n * d
                if pos + nbytes > len(data):
                    raise FormatError("truncated raw segment", pos)
                segments.append(np.frombuffer(data, dtype="<f4", count=n * d, offset=pos).reshape(n, d))
                pos += nbytes
            stream.init[:n_init] = segments[0]
            stream.pending[:n_pending] = segments[1]
            stream.local.extend(segments[2])
            if pos + 4 > len(data):
                raise FormatError("truncated stage table", pos)
            (n_stages,) = struct.unpack_from("<I", data, pos)
            sizes = struct.unpack_from(f"<{n_stages}I", data, pos + 4) if pos + 4 + 4 * n_stages <= len(data) else None
            if sizes is None or tuple(sizes) != stream.stack.sizes:
                raise FormatError("stage-size table does not match the stack", pos)
            pos += 4 + 4 * n_stages
            (nbytes,) = struct.unpack_from("<Q", data, pos) if pos + 8 <= len(data) else (None,)
            if nbytes is None or nbytes != -(-n_inter * stream.stack.bits_per_vector // 8):
                raise FormatError("bad payload length", pos)
            pos += 8
            if pos + nbytes > len(data):
                raise FormatError("truncated code payload", pos)
            stream.codes = CodeMatrix.from_packed(data[pos:pos + nbytes], n_inter, sizes)
            stream.residual_norms = np.full(n_inter, np.nan)
            pos += nbytes
        if pos != len(data):
            raise FormatError("trailing bytes after snapshot", pos)
        state.n_init, state.n_pending, state.total_len = n_init, n_pending, total
        state.prefill_compressions, state.decode_compressions = pre_c, dec_c
        return state

    @classmethod
    def load(cls, path, key_stack, value_stack, block_size: int = 4096) -> "CacheState":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read(), key_stack, value_stack, block_size)


def prefill(state: CacheState, keys, values) -> CacheState:
    """Store a prompt's cache; the caller keeps using the raw ``keys``/``values``."""
    return state.prefill(keys, values)


def append_token(state: CacheState, key, value) -> CacheState:
    return state.append_token(key, value)


def view_block(state: CacheState, begin: int, end: int):
    return state.view_block(begin, end)


def memory_report(state: CacheState) -> MemoryReport:
    return state.memory_report()
