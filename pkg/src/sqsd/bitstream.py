"""MSB-first bit packing for fixed-width integer fields."""

from __future__ import annotations

from .errors import InvalidArgument, TruncatedPacket


class BitWriter:
    def __init__(self):
        self._acc = 0
        self.bit_length = 0

    def write(self, value: int, nbits: int) -> None:
        if nbits == 0:
            if value != 0:
                raise InvalidArgument(f"value {value} does not fit in 0 bits")
            return
        if value < 0 or value >> nbits:
            raise InvalidArgument(f"value {value} does not fit in {nbits} bits")
        self._acc = (self._acc << nbits) | value
        self.bit_length += nbits

    def getvalue(self) -> bytes:
        """Contents zero-padded on the right to a whole number of bytes."""
        pad = -self.bit_length % 8
        nbytes = (self.bit_length + pad) // 8
        return (self._acc << pad).to_bytes(nbytes, "big")


class BitReader:
    def __init__(self, data: bytes):
        self._value = int.from_bytes(data, "big")
        self.total_bits = 8 * len(data)
        self.position = 0

    @property
    def remaining(self) -> int:
        return self.total_bits - self.position

    def read(self, nbits: int) -> int:
        if nbits == 0:
            return 0
        if nbits > self.remaining:
            raise TruncatedPacket(
                f"need {nbits} bits at offset {self.position}, only {self.remaining} left")
        shift = self.total_bits - self.position - nbits
        self.position += nbits
        return (self._value >> shift) & ((1 << nbits) - 1)

    def rest_is_padding(self) -> bool:
        return self.remaining < 8 and self.read(self.remaining) == 0
