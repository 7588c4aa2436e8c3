"""
Adaptive arithmetic coding with a 32-bit renormalizing range coder.

Binary masks use a two-symbol model whose counts start at 1/1; nonzero
weight symbols use the same model over the 2^b codebook.
"""

import logging

import numpy as np

from codec.bitio import Bitstream
from codec.bitio import BitReader
from codec.bitio import BitWriter
from errors import CorruptStreamError

logger = logging.getLogger(__name__)

STATE_BITS = 32
FULL_RANGE = 1 << STATE_BITS
HALF_RANGE = FULL_RANGE >> 1
QUARTER_RANGE = HALF_RANGE >> 1
MINIMUM_RANGE = QUARTER_RANGE + 2
MAXIMUM_TOTAL = MINIMUM_RANGE
STATE_MASK = FULL_RANGE - 1


class AdaptiveFrequencies:
    """Symbol counts starting at 1, halved whenever the total would overflow the coder."""

    def __init__(self, alphabet: int):
        if alphabet < 2:
            raise ValueError(f"alphabet needs at least two symbols, got {alphabet}")
        self.counts = np.ones(alphabet, dtype=np.int64)
        self._rebuild()

    def _rebuild(self):
        self.cumulative = np.concatenate([[0], np.cumsum(self.counts)])

    @property
    def total(self) -> int:
        return int(self.cumulative[-1])

    def low(self, symbol: int) -> int:
        return int(self.cumulative[symbol])

    def high(self, symbol: int) -> int:
        return int(self.cumulative[symbol + 1])

    def symbol_at(self, value: int) -> int:
        return int(np.searchsorted(self.cumulative, value, side="right")) - 1

    def increment(self, symbol: int):
        self.counts[symbol] += 1
        self.cumulative[symbol + 1:] += 1
        if self.total >= MAXIMUM_TOTAL:
            self.counts = (self.counts + 1) // 2
            self._rebuild()


class _Coder:
    def __init__(self):
        self.low = 0
        self.high = STATE_MASK

    def _update(self, freqs: AdaptiveFrequencies, symbol: int):
        span = self.high - self.low + 1
        total = freqs.total
        self.high = self.low + freqs.high(symbol) * span // total - 1
        self.low = self.low + freqs.low(symbol) * span // total
        while ((self.low ^ self.high) & HALF_RANGE) == 0:
            self._shift()
            self.low = (self.low << 1) & STATE_MASK
            self.high = ((self.high << 1) & STATE_MASK) | 1
        while self.low & ~self.high & QUARTER_RANGE:
            self._underflow()
            self.low = (self.low << 1) ^ HALF_RANGE
            self.high = ((self.high ^ HALF_RANGE) << 1) | HALF_RANGE | 1

    def _shift(self):
        raise NotImplementedError

    def _underflow(self):
        raise NotImplementedError


class ArithmeticEncoder(_Coder):
    def __init__(self, writer: BitWriter):
        super().__init__()
        self.writer = writer
        self.pending = 0

    def write(self, freqs: AdaptiveFrequencies, symbol: int):
        self._update(freqs, symbol)

    def finish(self):
        self.writer.write(1)

    def _shift(self):
        bit = self.low >> (STATE_BITS - 1)
        self.writer.write(bit)
        for _ in range(self.pending):
            self.writer.write(bit ^ 1)
        self.pending = 0

    def _underflow(self):
        self.pending += 1


class ArithmeticDecoder(_Coder):
    def __init__(self, reader: BitReader):
        super().__init__()
        self.reader = reader
        self.code = reader.read_bits(STATE_BITS)

    def read(self, freqs: AdaptiveFrequencies) -> int:
        span = self.high - self.low + 1
        value = ((self.code - self.low + 1) * freqs.total - 1) // span
        if not 0 <= value < freqs.total:
            raise CorruptStreamError(self.reader.position, "code value outside the coding interval")
        symbol = freqs.symbol_at(value)
        self._update(freqs, symbol)
        return symbol

    def _shift(self):
        self.code = ((self.code << 1) & STATE_MASK) | self.reader.read()

    def _underflow(self):
        self.code = (self.code & HALF_RANGE) | ((self.code << 1) & (STATE_MASK >> 1)) | self.reader.read()


def arithmetic_encode_symbols(symbols, alphabet: int) -> Bitstream:
    writer = BitWriter()
    encoder = ArithmeticEncoder(writer)
    freqs = AdaptiveFrequencies(alphabet)
    for s in np.asarray(symbols, dtype=np.int64).reshape(-1).tolist():
        if not 0 <= s < alphabet:
            raise ValueError(f"symbol {s} outside alphabet of {alphabet}")
        encoder.write(freqs, s)
        freqs.increment(s)
    encoder.finish()
    return writer.getvalue()


def arithmetic_decode_symbols(stream: Bitstream, count: int, alphabet: int) -> np.ndarray:
    # the decoder reads a state width past the last bit, plus any underflow bits the encoder left pending
    reader = BitReader(stream.data, stream.bits, pad=2 * STATE_BITS)
    decoder = ArithmeticDecoder(reader)
    freqs = AdaptiveFrequencies(alphabet)
    out = np.empty(count, dtype=np.int64)
    for i in range(count):
        s = decoder.read(freqs)
        freqs.increment(s)
        out[i] = s
    return out


def arithmetic_encode_mask(mask) -> Bitstream:
    mask = np.asarray(mask).reshape(-1)
    if mask.size == 0:
        raise ValueError("cannot code an empty mask")
    return arithmetic_encode_symbols((mask > 0).astype(np.int64), 2)


def arithmetic_decode_mask(stream: Bitstream, n: int) -> np.ndarray:
    return arithmetic_decode_symbols(stream, n, 2).astype(np.uint8)
