"""Byte-wise carry-less range coder with 64-bit state.

The coder follows the classic Subbotin construction: renormalisation emits
whole bytes, and instead of propagating carries the range is clamped at
byte boundaries (a tiny efficiency loss, a much simpler coder).  Frequencies
are expressed against a caller-chosen total; all cumulative-frequency models
in this package use a 16-bit total so the range never underflows between
renormalisations.

The decoder is total: it never raises on truncated or corrupt input.  Reads
past the end of the buffer yield zero bytes and decoded frequencies are
clamped into range, so validity checking is the caller's job (CRCs, symbol
count checks).
"""

from __future__ import annotations

_MASK = (1 << 64) - 1
_TOP = 1 << 56
_BOTTOM = 1 << 48

PROB_BITS = 16
PROB_TOTAL = 1 << PROB_BITS


class RangeEncoder:
    def __init__(self):
        self.low = 0
        self.range = _MASK
        self._out = bytearray()

    def encode(self, cum_lo, cum_hi, total):
        """Narrow the interval to [cum_lo, cum_hi) out of total."""
        if not (0 <= cum_lo < cum_hi <= total):
            raise ValueError("bad cumulative frequency interval")
        r = self.range // total
        self.low = (self.low + r * cum_lo) & _MASK
        self.range = r * (cum_hi - cum_lo)
        self._normalize()

    def encode_byte_uniform(self, byte):
        self.encode(byte * 256, (byte + 1) * 256, PROB_TOTAL)

    def _normalize(self):
        low, rng, out = self.low, self.range, self._out
        while True:
            if (((low + rng) & _MASK) ^ low) < _TOP:
                pass
            elif rng < _BOTTOM:
                # carry-less clamp: shrink range up to the next byte boundary
                rng = ((1 << 64) - low) & (_BOTTOM - 1)
            else:
                break
            out.append((low >> 56) & 0xFF)
            low = (low << 8) & _MASK
            rng = (rng << 8) & _MASK
        self.low, self.range = low, rng

    def finish(self):
        """Flush the state; returns the complete byte stream."""
        low = self.low
        for _ in range(8):
            self._out.append((low >> 56) & 0xFF)
            low = (low << 8) & _MASK
        self.low = low
        self.range = 0
        return bytes(self._out)


class RangeDecoder:
    def __init__(self, data):
        self._data = data
        self._pos = 0
        self.low = 0
        self.range = _MASK
        self.code = 0
        for _ in range(8):
            self.code = ((self.code << 8) | self._next_byte()) & _MASK

    def _next_byte(self):
        if self._pos < len(self._data):
            b = self._data[self._pos]
        else:
            b = 0
        self._pos += 1
        return b

    @property
    def overrun(self):
        """True once the decoder has read past the end of its buffer.

        A well-formed stream consumes exactly its own bytes, so overrun
        is a reliable corruption signal for callers that track it.
        """
        return self._pos > len(self._data)

    def decode_freq(self, total):
        """Frequency of the pending symbol, clamped to [0, total)."""
        r = self.range // total
        f = (self.code - self.low) // r
        if f >= total:
            f = total - 1
        elif f < 0:  # only reachable on corrupt input
            f = 0
        return f

    def decode_update(self, cum_lo, cum_hi, total):
        r = self.range // total
        self.low = (self.low + r * cum_lo) & _MASK
        self.range = r * (cum_hi - cum_lo)
        low, rng, code = self.low, self.range, self.code
        while True:
            if (((low + rng) & _MASK) ^ low) < _TOP:
                pass
            elif rng < _BOTTOM:
                rng = ((1 << 64) - low) & (_BOTTOM - 1)
            else:
                break
            code = ((code << 8) | self._next_byte()) & _MASK
            low = (low << 8) & _MASK
            rng = (rng << 8) & _MASK
        self.low, self.range, self.code = low, rng, code

    def decode_byte_uniform(self):
        b = self.decode_freq(PROB_TOTAL) >> 8
        self.decode_update(b * 256, (b + 1) * 256, PROB_TOTAL)
        return b


class AdaptiveBitModel:
    """Order-0 adaptive binary model backed by halving counters.

    Counts start at 1/1 and grow by 16 per observation; once the total
    would exceed 2**16 both counts are halved (rounding up) so the model
    keeps adapting.  Encoder and decoder evolve identically as long as
    they see the same bit sequence.
    """

    __slots__ = ("c0", "c1")

    _INCREMENT = 16
    _LIMIT = 1 << 16

    def __init__(self):
        self.c0 = 1
        self.c1 = 1

    def _update(self, bit):
        if bit:
            self.c1 += self._INCREMENT
        else:
            self.c0 += self._INCREMENT
        if self.c0 + self.c1 > self._LIMIT:
            self.c0 = (self.c0 + 1) >> 1
            self.c1 = (self.c1 + 1) >> 1

    def encode(self, enc, bit):
        total = self.c0 + self.c1
        if bit:
            enc.encode(self.c0, total, total)
        else:
            enc.encode(0, self.c0, total)
        self._update(bit)

    def decode(self, dec):
        total = self.c0 + self.c1
        f = dec.decode_freq(total)
        bit = 1 if f >= self.c0 else 0
        if bit:
            dec.decode_update(self.c0, total, total)
        else:
            dec.decode_update(0, self.c0, total)
        self._update(bit)
        return bit
