"""
Golomb-Rice codes for nonnegative integers and the run-length mask coder
built on them. Signed levels are mapped with zigzag (0, -1, 1, -2, ... ->
0, 1, 2, 3, ...) before coding.
"""

import numpy as np

from codec.bitio import Bitstream
from codec.bitio import BitReader
from codec.bitio import BitWriter
from errors import CorruptStreamError

K_FIELD_BITS = 6


def zigzag(values) -> np.ndarray:
    v = np.asarray(values, dtype=np.int64)
    return np.where(v >= 0, 2 * v, -2 * v - 1)


def unzigzag(symbols) -> np.ndarray:
    u = np.asarray(symbols, dtype=np.int64)
    return np.where(u % 2 == 0, u // 2, -(u + 1) // 2)


def _check(values, k: int) -> np.ndarray:
    if k < 0:
        raise ValueError(f"Golomb-Rice parameter must be >= 0, got {k}")
    values = np.asarray(values, dtype=np.int64).reshape(-1)
    if values.size and values.min() < 0:
        raise ValueError("Golomb-Rice coding needs nonnegative values")
    return values


def rice_length(values, k: int) -> int:
    """Exact coded length in bits."""
    values = _check(values, k)
    return int(np.sum((values >> k) + 1 + k))


def best_k(values, max_k: int) -> int:
    """Exhaustive scan over k in [0, max_k]; the smallest k wins ties."""
    values = _check(values, 0)
    lengths = [rice_length(values, k) for k in range(max_k + 1)]
    return int(np.argmin(lengths))


def golomb_rice_encode(values, k: int, writer: BitWriter | None = None) -> Bitstream:
    values = _check(values, k)
    out = writer if writer is not None else BitWriter()
    mask = (1 << k) - 1
    for v in values.tolist():
        out.write_unary(v >> k)
        out.write_bits(v & mask, k)
    return out.getvalue()


def golomb_rice_decode(stream: Bitstream | BitReader, count: int, k: int, limit: int | None = None) -> np.ndarray:
    """`limit` bounds a decoded value; larger quotients mean a corrupt stream."""
    reader = stream if isinstance(stream, BitReader) else BitReader(stream.data, stream.bits)
    q_limit = None if limit is None else limit >> k
    out = np.empty(count, dtype=np.int64)
    for i in range(count):
        q = reader.read_unary(q_limit)
        out[i] = (q << k) | reader.read_bits(k)
    return out


# ----------------------------
# Run-length masks
# ----------------------------

def run_lengths(mask) -> tuple[int, np.ndarray]:
    """(first bit, lengths of the alternating runs)."""
    bits = (np.asarray(mask).reshape(-1) > 0).astype(np.int8)
    if bits.size == 0:
        raise ValueError("cannot code an empty mask")
    edges = np.flatnonzero(np.diff(bits)) + 1
    bounds = np.concatenate([[0], edges, [bits.size]])
    return int(bits[0]), np.diff(bounds)


def rle_encode_mask(mask, k: int | None = None) -> Bitstream:
    """
    First bit, the Golomb-Rice parameter in 6 bits, then every run length
    minus one. k defaults to the best one for the runs.
    """
    first, runs = run_lengths(mask)
    if k is None:
        k = best_k(runs - 1, min(int(np.ceil(np.log2(runs.max() + 1))), (1 << K_FIELD_BITS) - 1))
    writer = BitWriter()
    writer.write(first)
    writer.write_bits(k, K_FIELD_BITS)
    return golomb_rice_encode(runs - 1, k, writer)


def rle_decode_mask(stream: Bitstream, n: int) -> np.ndarray:
    reader = BitReader(stream.data, stream.bits)
    bit = reader.read()
    k = reader.read_bits(K_FIELD_BITS)
    out = np.empty(n, dtype=np.uint8)
    filled = 0
    while filled < n:
        start = reader.position
        run = int(golomb_rice_decode(reader, 1, k, n - 1)[0]) + 1
        if filled + run > n:
            raise CorruptStreamError(start, f"run of {run} overruns the {n} mask elements")
        out[filled:filled + run] = bit
        filled += run
        bit ^= 1
    if reader.remaining:
        raise CorruptStreamError(reader.position, f"{reader.remaining} trailing bits after the last run")
    return out
