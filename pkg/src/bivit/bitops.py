"""Bit-packed sign matrices and XNOR/popcount matrix products.

A ``BitMatrix`` stores a matrix of +1/-1 values one bit per entry, packed
row-major into 64-bit words along the column (reduction) axis. Bit ``b`` of
a row is set when the logical value is +1 and clear when it is -1; bits past
``cols`` in the last word are always zero.

The product of two packed matrices is exact integer arithmetic::

    dot(a_i, b_j) = 2 * popcount(xnor(a_i, b_j) & valid) - k

Two kernels compute it: a numba ``@njit`` loop and a pure numpy fallback
(vectorised XOR + ``np.bitwise_count``). ``set_backend`` switches between
them at runtime; ``BIVIT_DISABLE_NUMBA=1`` forces numpy at import time.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass

import numpy as np

from ._accel import HAVE_NUMBA, njit

WORD_BITS = 64
MAX_K = 1 << 15

# Kernel-call instrumentation, read by tests asserting that binarized paths
# never fall back to dense float products.
COUNTERS: Counter = Counter()

_ALL_ONES = np.uint64(0xFFFFFFFFFFFFFFFF)


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


def words_for(cols: int) -> int:
    return (cols + WORD_BITS - 1) // WORD_BITS


def tail_mask_for(cols: int) -> np.uint64:
    rem = cols % WORD_BITS
    if rem == 0:
        return _ALL_ONES
    return np.uint64((1 << rem) - 1)


def pack_rows(m) -> np.ndarray:
    """Pack the signs of ``m`` along its last axis into uint64 words.

    Leading axes are kept, so an array of shape ``(..., k)`` becomes
    ``(..., ceil(k / 64))``. Entries ``>= 0`` map to set bits.
    """
    m = np.asarray(m)
    k = m.shape[-1]
    nw = words_for(k)
    bits = np.packbits(m >= 0, axis=-1, bitorder="little")
    pad = nw * 8 - bits.shape[-1]
    if pad:
        widths = [(0, 0)] * (bits.ndim - 1) + [(0, pad)]
        bits = np.pad(bits, widths)
    return np.ascontiguousarray(bits).view("<u8").astype(np.uint64, copy=False)


def unpack_rows(words: np.ndarray, k: int) -> np.ndarray:
    raw = np.ascontiguousarray(words.astype("<u8", copy=False)).view(np.uint8)
    bits = np.unpackbits(raw, axis=-1, count=k, bitorder="little")
    return bits.astype(np.float64) * 2.0 - 1.0


@dataclass(frozen=True, eq=False)
class BitMatrix:
    """Immutable bit-packed +1/-1 matrix in canonical (zero-padded) form."""

    rows: int
    cols: int
    data: np.ndarray  # (rows, words_per_row) uint64

    def __post_init__(self):
        if self.data.shape != (self.rows, words_for(self.cols)):
            raise ShapeError(
                f"data shape {self.data.shape} does not match "
                f"{self.rows}x{words_for(self.cols)} words"
            )
        self.data.setflags(write=False)

    @property
    def words_per_row(self) -> int:
        return words_for(self.cols)

    @property
    def tail_mask(self) -> np.uint64:
        return tail_mask_for(self.cols)

    @property
    def shape(self) -> tuple[int, int]:
        return (self.rows, self.cols)

    def is_canonical(self) -> bool:
        if self.cols == 0 or self.rows == 0:
            return True
        last = self.data[:, -1]
        return bool(np.all((last & ~self.tail_mask) == 0))

    def __eq__(self, other):
        if not isinstance(other, BitMatrix):
            return NotImplemented
        return self.shape == other.shape and np.array_equal(self.data, other.data)

    def __repr__(self):
        return f"BitMatrix({self.rows}x{self.cols})"


def pack_signs(m) -> BitMatrix:
    """Pack a real matrix into a BitMatrix; sign(0) is taken as +1."""
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got shape {m.shape}")
    rows, cols = m.shape
    data = pack_rows(m) if cols else np.zeros((rows, 0), dtype=np.uint64)
    return BitMatrix(rows, cols, np.array(data, dtype=np.uint64))


def unpack(b: BitMatrix) -> np.ndarray:
    if b.cols == 0:
        return np.zeros((b.rows, 0))
    return unpack_rows(b.data, b.cols)


# --------------------------------------------------------------------------
# kernels: a (B, m, W) x b (B, n, W) -> (B, m, n) int32
# --------------------------------------------------------------------------


@njit(cache=True)
def _popcount64(x):
    x = x - ((x >> np.uint64(1)) & np.uint64(0x5555555555555555))
    x = (x & np.uint64(0x3333333333333333)) + (
        (x >> np.uint64(2)) & np.uint64(0x3333333333333333)
    )
    x = (x + (x >> np.uint64(4))) & np.uint64(0x0F0F0F0F0F0F0F0F)
    return (x * np.uint64(0x0101010101010101)) >> np.uint64(56)


@njit(cache=True)
def _gemm_numba(a, b, k, tail):
    nb, m, nw = a.shape
    n = b.shape[1]
    out = np.empty((nb, m, n), dtype=np.int32)
    for p in range(nb):
        for i in range(m):
            for j in range(n):
                cnt = np.uint64(0)
                for w in range(nw - 1):
                    cnt += _popcount64(~(a[p, i, w] ^ b[p, j, w]))
                cnt += _popcount64(~(a[p, i, nw - 1] ^ b[p, j, nw - 1]) & tail)
                out[p, i, j] = 2 * np.int32(cnt) - k
    return out


def _gemm_numpy(a, b, k, tail):
    nb, m, nw = a.shape
    n = b.shape[1]
    out = np.empty((nb, m, n), dtype=np.int32)
    mask = np.full(nw, _ALL_ONES, dtype=np.uint64)
    mask[-1] = tail
    # bound the (rows, n, words) temporary to ~4M words
    step = max(1, (1 << 22) // max(1, n * nw))
    for p in range(nb):
        bp = b[p][None, :, :]
        for s in range(0, m, step):
            x = ~(a[p, s : s + step, None, :] ^ bp) & mask
            cnt = np.bitwise_count(x).sum(axis=-1, dtype=np.int32)
            out[p, s : s + step] = 2 * cnt - k
    return out


_BACKENDS = {"numpy": _gemm_numpy}
if HAVE_NUMBA:
    _BACKENDS["numba"] = _gemm_numba
_backend = "numba" if HAVE_NUMBA else "numpy"


def available_backends() -> list[str]:
    return sorted(_BACKENDS)


def get_backend() -> str:
    return _backend


def set_backend(name: str) -> None:
    global _backend
    if name not in _BACKENDS:
        raise ValueError(f"unknown backend {name!r}; have {available_backends()}")
    _backend = name


def packed_gemm(a_words: np.ndarray, b_words: np.ndarray, k: int) -> np.ndarray:
    """Integer products of packed rows, broadcasting leading axes.

    ``a_words`` has shape ``(..., m, W)`` and ``b_words`` ``(..., n, W)``;
    the result has shape ``(..., m, n)`` and holds exact dot products of the
    underlying +1/-1 rows of length ``k``.
    """
    if a_words.shape[-1] != b_words.shape[-1] or a_words.shape[-1] != words_for(k):
        raise ShapeError(
            f"word counts {a_words.shape[-1]} / {b_words.shape[-1]} "
            f"do not match k={k}"
        )
    if k > MAX_K:
        raise ValueError(f"k={k} exceeds the int32 accumulator bound {MAX_K}")
    COUNTERS["bit_gemm"] += 1
    kernel = _BACKENDS[_backend]
    tail = tail_mask_for(k)
    nw = a_words.shape[-1]
    m, n = a_words.shape[-2], b_words.shape[-2]
    if k == 0:
        lead = np.broadcast_shapes(a_words.shape[:-2], b_words.shape[:-2])
        return np.zeros(lead + (m, n), dtype=np.int32)
    if b_words.ndim == 2:
        lead = a_words.shape[:-2]
        a3 = np.ascontiguousarray(a_words.reshape(1, -1, nw))
        b3 = np.ascontiguousarray(b_words[None])
        return kernel(a3, b3, k, tail).reshape(lead + (m, n))
    lead = np.broadcast_shapes(a_words.shape[:-2], b_words.shape[:-2])
    a3 = np.ascontiguousarray(np.broadcast_to(a_words, lead + (m, nw)).reshape(-1, m, nw))
    b3 = np.ascontiguousarray(np.broadcast_to(b_words, lead + (n, nw)).reshape(-1, n, nw))
    return kernel(a3, b3, k, tail).reshape(lead + (m, n))


def xnor_popcount_gemm(a: BitMatrix, b: BitMatrix) -> np.ndarray:
    """Exact ``unpack(a) @ unpack(b).T`` as an int32 matrix."""
    if a.cols != b.cols:
        raise ShapeError(f"reduction widths differ: {a.cols} vs {b.cols}")
    return packed_gemm(a.data, b.data, a.cols)


def scaled_gemm(a: BitMatrix, b: BitMatrix, alpha) -> np.ndarray:
    """Per-output-channel scaled product ``alpha[j] * (a . b_j)``."""
    alpha = np.atleast_1d(np.asarray(alpha, dtype=np.float64))
    if alpha.ndim != 1 or alpha.size not in (1, b.rows):
        raise ShapeError(f"alpha has {alpha.size} entries, expected 1 or {b.rows}")
    if np.any(~(alpha > 0)):
        raise ValueError("channel scales must be strictly positive")
    return xnor_popcount_gemm(a, b).astype(np.float64) * alpha
