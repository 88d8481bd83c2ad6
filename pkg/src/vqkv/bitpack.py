"""Fixed-width little-endian bit packing of code matrices.

Each row of an ``L x N`` integer matrix is written as N fields, field ``i``
being ``widths[i]`` bits wide, least significant bit first.  Rows follow one
another with no padding; only the final byte is zero-padded.
"""

import math

import numpy as np

from .errors import InvalidInputError


def bit_width(size: int) -> int:
    """Bits needed to store any index below ``size`` (``ceil(log2 size)``)."""
    if size < 1:
        raise InvalidInputError(f"codebook size must be >= 1, got {size}")
    return (size - 1).bit_length()


def packed_nbits(rows: int, widths) -> int:
    return rows * int(sum(widths))


def pack(codes: np.ndarray, widths) -> bytes:
    codes = np.asarray(codes)
    widths = [int(w) for w in widths]
    if codes.ndim != 2 or codes.shape[1] != len(widths):
        raise InvalidInputError(
            f"codes of shape {codes.shape} do not match {len(widths)} field widths"
        )
    if any(w < 0 or w > 63 for w in widths):
        raise InvalidInputError(f"field widths must be in [0, 63], got {widths}")
    if codes.size and (codes.min() < 0 or any(
        codes[:, i].max() >> w for i, w in enumerate(widths)
    )):
        raise InvalidInputError("a code does not fit in its field width")
    total = sum(widths)
    if codes.shape[0] == 0 or total == 0:
        return b""
    values = codes.astype(np.uint64)
    fields = []
    for i, w in enumerate(widths):
        if w:
            shifts = np.arange(w, dtype=np.uint64)
            fields.append(((values[:, i, None] >> shifts) & np.uint64(1)).astype(np.uint8))
    bits = np.concatenate(fields, axis=1).reshape(-1)
    return np.packbits(bits, bitorder="little").tobytes()


def unpack(payload: bytes, rows: int, widths) -> np.ndarray:
    widths = [int(w) for w in widths]
    total = sum(widths)
    out = np.zeros((rows, len(widths)), dtype=np.int64)
    if rows == 0 or total == 0:
        return out
    need = math.ceil(rows * total / 8)
    if len(payload) < need:
        raise InvalidInputError(f"payload has {len(payload)} bytes, need {need}")
    raw = np.frombuffer(payload, dtype=np.uint8, count=need)
    bits = np.unpackbits(raw, bitorder="little")[: rows * total].reshape(rows, total)
    start = 0
    for i, w in enumerate(widths):
        if w:
            weights = np.left_shift(np.int64(1), np.arange(w, dtype=np.int64))
            out[:, i] = bits[:, start:start + w].astype(np.int64) @ weights
            start += w
    return out
