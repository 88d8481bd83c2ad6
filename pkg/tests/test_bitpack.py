import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from vqkv import bitpack
from vqkv.errors import InvalidInputError


@pytest.mark.parametrize("size, width", [(1, 0), (2, 1), (3, 2), (4, 2), (5, 3), (256, 8),
                                         (257, 9), (1024, 10), (65536, 16)])
def test_bit_width(size, width):
    assert bitpack.bit_width(size) == width


def test_known_layout():
    # 5 -> 101 and 17 -> 10001, least significant bit first: 1,0,1 | 1,0,0,0,1
    assert bitpack.pack(np.array([[5, 17]]), [3, 5]) == bytes([0b10001101])


def test_rows_are_not_byte_aligned():
    # 3-bit fields 1,0,1,1 set stream bits 0, 6 and 9
    codes = np.array([[1], [0], [1], [1]])
    assert bitpack.pack(codes, [3]) == bytes([0b01000001, 0b00000010])
    assert np.array_equal(bitpack.unpack(bitpack.pack(codes, [3]), 4, [3]), codes)


def test_packed_size_is_exact():
    widths = [10] * 56
    codes = np.random.default_rng(0).integers(0, 1024, size=(7, 56))
    payload = bitpack.pack(codes, widths)
    assert bitpack.packed_nbits(7, widths) == 7 * 560
    assert len(payload) == -(-7 * 560 // 8)


def test_rejects_overflowing_codes():
    with pytest.raises(InvalidInputError):
        bitpack.pack(np.array([[4]]), [2])
    with pytest.raises(InvalidInputError):
        bitpack.pack(np.array([[-1]]), [2])


def test_short_payload():
    with pytest.raises(InvalidInputError):
        bitpack.unpack(b"\x00", 3, [8])


@st.composite
def code_matrices(draw):
    widths = draw(st.lists(st.integers(0, 17), min_size=1, max_size=6))
    rows = draw(st.integers(0, 20))
    cols = [
        draw(st.lists(st.integers(0, (1 << w) - 1), min_size=rows, max_size=rows))
        for w in widths
    ]
    return np.array(cols, dtype=np.int64).T.reshape(rows, len(widths)), widths


@settings(max_examples=200, deadline=None)
@given(code_matrices())
def test_roundtrip(case):
    codes, widths = case
    payload = bitpack.pack(codes, widths)
    assert np.array_equal(bitpack.unpack(payload, codes.shape[0], widths), codes)


@settings(max_examples=100, deadline=None)
@given(code_matrices(), st.integers(0, 20))
def test_prefix_bits_survive_appending(case, split):
    codes, widths = case
    split = min(split, codes.shape[0])
    head = bitpack.pack(codes[:split], widths)
    full = bitpack.pack(codes, widths)
    nbits = bitpack.packed_nbits(split, widths)
    head_bits = np.unpackbits(np.frombuffer(head, np.uint8), bitorder="little")[:nbits]
    full_bits = np.unpackbits(np.frombuffer(full, np.uint8), bitorder="little")[:nbits]
    assert np.array_equal(head_bits, full_bits)
