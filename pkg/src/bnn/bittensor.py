"""Bit-packed binary tensors and the XNOR/popcount dot-product kernels.

A real-valued tensor is binarized with sign (0 maps to +1) and stored as
packed bits: bit value 1 encodes +1, bit value 0 encodes -1.  Each
innermost row is padded up to a whole number of 64-bit words; padding
bits are always set to 1 so the inner loop stays branch-free, and the
known padding contribution is subtracted from the popcount afterwards.

The dot product of two {-1,+1} vectors of length n packed this way is

    2 * popcount(xnor(x, w)) - n - 2 * pad_bits

which is exact integer arithmetic, so results match a float reference
bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError

WORD_BITS = 64

_BYTE_SHIFTS = (np.arange(8, dtype=np.uint64) * np.uint64(8))
_POPCOUNT_TABLE = np.array(
    [bin(i).count("1") for i in range(256)], dtype=np.uint8
)

_HAVE_HW_POPCOUNT = hasattr(np, "bitwise_count")


def popcount_words(words: np.ndarray) -> np.ndarray:
    """Per-word popcount using the hardware instruction when available."""
    if _HAVE_HW_POPCOUNT:
        return np.bitwise_count(words)
    return popcount_words_portable(words)


def popcount_words_portable(words: np.ndarray) -> np.ndarray:
    """Table-driven popcount fallback; bit-exact equal to the fast path."""
    as_bytes = words.view(np.uint8).reshape(words.shape + (8,))
    return _POPCOUNT_TABLE[as_bytes].sum(axis=-1, dtype=np.uint64)


@dataclass(frozen=True)
class BitTensor:
    """Packed {0,1} representation of a {-1,+1} tensor, word-aligned rows.

    words has shape outer_dims + (words_per_row,); within a word bit i of
    the logical row occupies bit position i % 64 (LSB-first).
    """

    shape: tuple
    words: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "shape", tuple(self.shape))
        expected = self.outer_size * self.words_per_row
        if self.words.size != expected:
            raise ShapeError(
                f"words array has {self.words.size} words, expected {expected}"
            )

    @property
    def logical_len(self) -> int:
        return self.shape[-1]

    @property
    def outer_size(self) -> int:
        return int(np.prod(self.shape[:-1], dtype=np.int64)) if len(self.shape) > 1 else 1

    @property
    def words_per_row(self) -> int:
        return max(1, -(-self.logical_len // WORD_BITS))

    @property
    def pad_bits_per_row(self) -> int:
        return self.words_per_row * WORD_BITS - self.logical_len

    def row_words(self) -> np.ndarray:
        """words as a 2-D (rows, words_per_row) view."""
        return self.words.reshape(self.outer_size, self.words_per_row)


def _bits_to_words(bits: np.ndarray) -> np.ndarray:
    """Pack a (rows, n) uint8 {0,1} array into (rows, wpr) uint64 words.

    Padding bits (to the next word boundary) are set to 1.
    """
    rows, n = bits.shape
    wpr = max(1, -(-n // WORD_BITS))
    padded = np.ones((rows, wpr * WORD_BITS), dtype=np.uint8)
    padded[:, :n] = bits
    packed = np.packbits(padded, axis=1, bitorder="little")  # (rows, wpr*8)
    as_u64 = packed.reshape(rows, wpr, 8).astype(np.uint64)
    return np.bitwise_or.reduce(as_u64 << _BYTE_SHIFTS, axis=-1)


def _words_to_bits(words: np.ndarray, n: int) -> np.ndarray:
    """Unpack (rows, wpr) uint64 words into a (rows, n) uint8 {0,1} array."""
    rows, wpr = words.shape
    as_bytes = (
        (words[:, :, None] >> _BYTE_SHIFTS) & np.uint64(0xFF)
    ).astype(np.uint8).reshape(rows, wpr * 8)
    bits = np.unpackbits(as_bytes, axis=1, bitorder="little")
    return bits[:, :n]


def pack(src: np.ndarray) -> BitTensor:
    """Binarize a real tensor (sign, with sign(0) = +1) and pack it."""
    src = np.asarray(src)
    if src.size == 0:
        raise ValueError("cannot pack an empty tensor")
    if src.shape == ():
        raise ValueError("cannot pack a 0-d tensor")
    bits = (src >= 0).astype(np.uint8)
    n = src.shape[-1]
    rows = bits.reshape(-1, n)
    return BitTensor(shape=src.shape, words=_bits_to_words(rows).reshape(-1))


def unpack(src: BitTensor) -> np.ndarray:
    """Expand a BitTensor back to dense float32 values in {-1.0, +1.0}."""
    if src.logical_len == 0:
        raise ValueError("cannot unpack a BitTensor with logical_len 0")
    bits = _words_to_bits(src.row_words(), src.logical_len)
    out = bits.astype(np.float32) * 2.0 - 1.0
    return out.reshape(src.shape)


def binary_dot(x: BitTensor, w: BitTensor) -> int:
    """Exact {-1,+1} dot product of two packed rows via XNOR + popcount."""
    if len(x.shape) != 1 or len(w.shape) != 1:
        raise ShapeError("binary_dot expects 1-D BitTensors")
    n = x.logical_len
    if w.logical_len != n:
        raise ShapeError(
            f"length mismatch: {n} vs {w.logical_len}"
        )
    agree = np.bitwise_not(np.bitwise_xor(x.words, w.words))
    raw = int(popcount_words(agree).sum())
    return 2 * raw - n - 2 * x.pad_bits_per_row


# Cap on the xnor scratch buffer used by binary_gemm (bytes).
_GEMM_CHUNK_BYTES = 64 << 20


def binary_gemm(
    a: BitTensor, b: BitTensor, transposed_b: bool = True
) -> np.ndarray:
    """Multiply packed matrices; returns float32 (M, N) of exact integers.

    a is (M, K).  With transposed_b (the fast layout) b is (N, K) so each
    output column's operand is a contiguous bit row; otherwise b is (K, N)
    and is repacked internally.
    """
    if len(a.shape) != 2 or len(b.shape) != 2:
        raise ShapeError("binary_gemm expects 2-D BitTensors")
    if not transposed_b:
        b = pack(unpack(b).T)
    m, k = a.shape
    n_out, k_b = b.shape
    if k_b != k:
        raise ShapeError(f"inner dimension mismatch: {k} vs {k_b}")

    aw = a.row_words()
    bw = b.row_words()
    wpr = a.words_per_row
    correction = k + 2 * a.pad_bits_per_row

    out = np.empty((m, n_out), dtype=np.float32)
    chunk = max(1, _GEMM_CHUNK_BYTES // max(1, n_out * wpr * 8))
    for start in range(0, m, chunk):
        stop = min(m, start + chunk)
        agree = np.bitwise_not(
            np.bitwise_xor(aw[start:stop, None, :], bw[None, :, :])
        )
        raw = popcount_words(agree).sum(axis=-1, dtype=np.int64)
        out[start:stop] = (2 * raw - correction).astype(np.float32)
    return out
