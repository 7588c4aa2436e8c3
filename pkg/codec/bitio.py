"""MSB-first bit streams over numpy packbits/unpackbits."""

from dataclasses import dataclass

import numpy as np

from errors import CorruptStreamError


@dataclass(frozen=True)
class Bitstream:
    data: bytes
    bits: int

    @property
    def nbytes(self) -> int:
        return len(self.data)


class BitWriter:
    def __init__(self):
        self._bits = []

    def __len__(self) -> int:
        return len(self._bits)

    def write(self, bit: int):
        self._bits.append(1 if bit else 0)

    def write_bits(self, value: int, width: int):
        if width and not 0 <= value < (1 << width):
            raise ValueError(f"{value} does not fit in {width} bits")
        for shift in range(width - 1, -1, -1):
            self._bits.append((value >> shift) & 1)

    def write_unary(self, q: int):
        """q ones then a zero."""
        self._bits.extend([1] * q)
        self._bits.append(0)

    def extend(self, bits):
        self._bits.extend(int(b) for b in bits)

    def getvalue(self) -> Bitstream:
        packed = np.packbits(np.asarray(self._bits, dtype=np.uint8)).tobytes()
        return Bitstream(packed, len(self._bits))


class BitReader:
    """
    Reads `nbits` bits of `data`. Up to `pad` further reads return 0 (the
    arithmetic decoder looks ahead past the last written bit); anything beyond
    raises CorruptStreamError with the bit offset.
    """

    def __init__(self, data: bytes, nbits: int | None = None, pad: int = 0):
        bits = np.unpackbits(np.frombuffer(data, dtype=np.uint8))
        if nbits is not None:
            if nbits > bits.size:
                raise CorruptStreamError(bits.size, f"stream declares {nbits} bits but holds {bits.size}")
            bits = bits[:nbits]
        self._bits = bits.tolist()
        self._limit = len(self._bits) + pad
        self.position = 0

    @property
    def remaining(self) -> int:
        return len(self._bits) - self.position

    def read(self) -> int:
        pos = self.position
        if pos >= self._limit:
            raise CorruptStreamError(pos, "read past end of stream")
        self.position += 1
        return self._bits[pos] if pos < len(self._bits) else 0

    def read_bits(self, width: int) -> int:
        value = 0
        for _ in range(width):
            value = (value << 1) | self.read()
        return value

    def read_unary(self, limit: int | None = None) -> int:
        start = self.position
        q = 0
        while self.read():
            q += 1
            if limit is not None and q > limit:
                raise CorruptStreamError(start, f"unary run longer than {limit}")
        return q
