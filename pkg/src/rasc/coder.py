"""Range coder with 16-bit frequency tables and the table builders that
discretize the entropy model's densities.

The coder keeps a 64-bit ``low`` register (33 bits live) and a 32-bit range,
emits bytes with a cache/carry scheme, and flushes five bytes at the end.
Decoding is exact; the decoder also checks that it consumed every byte and
that the residual code value is zero, which catches most corruption.
"""
from __future__ import annotations

import bisect
import math
from dataclasses import dataclass

import numpy as np

PRECISION = 16
TOTAL = 1 << PRECISION
TOP = 1 << 24
MASK32 = (1 << 32) - 1
MAX_ALPHABET_HALF = 64
SCALE_MIN, SCALE_MAX, SCALE_COUNT = 0.11, 256.0, 64
MAX_ESCAPE_BITS = 40


class RangeCoderError(ValueError):
    pass


class DecodeError(RangeCoderError):
    pass


@dataclass
class CdfTable:
    """Symbols ``offset .. offset + len(freqs) - 2`` plus a trailing escape bucket."""

    offset: int
    freqs: list
    cum: list

    @classmethod
    def from_freqs(cls, offset: int, freqs) -> "CdfTable":
        freqs = [int(f) for f in freqs]
        if sum(freqs) != TOTAL:
            raise RangeCoderError(f"frequencies sum to {sum(freqs)}, expected {TOTAL}")
        if min(freqs) < 1:
            raise RangeCoderError("every symbol needs frequency >= 1")
        cum = [0]
        for f in freqs:
            cum.append(cum[-1] + f)
        return cls(offset, freqs, cum)

    @classmethod
    def from_pmf(cls, offset: int, pmf, tail_mass: float) -> "CdfTable":
        return cls.from_freqs(offset, quantize_pmf(list(pmf) + [tail_mass]))

    @property
    def escape(self) -> int:
        return len(self.freqs) - 1

    @property
    def lo(self) -> int:
        return self.offset

    @property
    def hi(self) -> int:
        return self.offset + len(self.freqs) - 2

    def bits(self, symbol: int) -> float:
        """Ideal code length of ``symbol`` in this table, escapes included."""
        if self.lo <= symbol <= self.hi:
            return -math.log2(self.freqs[symbol - self.offset] / TOTAL)
        return -math.log2(self.freqs[self.escape] / TOTAL) + _escape_bits(self._overflow(symbol)[1])

    def _overflow(self, symbol: int) -> tuple[int, int]:
        if symbol > self.hi:
            return 0, symbol - self.hi - 1
        return 1, self.lo - symbol - 1

    def to_bytes(self) -> bytes:
        return np.asarray([self.offset, len(self.freqs), *self.freqs], dtype="<i4").tobytes()


def quantize_pmf(pmf, total: int = TOTAL) -> list:
    """Integer frequencies summing to ``total``, each >= 1 and within one
    unit of ``p * total`` wherever that floor is not forced.

    Largest-remainder rounding; any excess created by the >= 1 floor is taken
    from the symbols with the smallest remainders that can spare it.
    """
    p = np.asarray(pmf, dtype=np.float64)
    if (p < 0).any() or not np.isfinite(p).all() or p.sum() <= 0:
        raise RangeCoderError("pmf must be finite, nonnegative and have positive mass")
    if len(p) > total:
        raise RangeCoderError("alphabet larger than table precision")
    target = p / p.sum() * total
    freq = np.maximum(np.floor(target).astype(np.int64), 1)
    rem = target - np.floor(target)
    diff = total - int(freq.sum())
    # stable orderings keep the construction deterministic across runs
    if diff > 0:
        order = np.lexsort((np.arange(len(p)), -rem))
        for i in range(diff):
            freq[order[i % len(p)]] += 1
    elif diff < 0:
        order = np.lexsort((np.arange(len(p)), rem))
        need = -diff
        while need:
            moved = False
            for i in order:
                if freq[i] > 1 and need:
                    freq[i] -= 1
                    need -= 1
                    moved = True
            if not moved:
                raise RangeCoderError("cannot satisfy minimum frequencies")
    return freq.tolist()


def _escape_bits(value: int) -> int:
    # sign bit + order-0 Exp-Golomb
    return 1 + 2 * (value + 1).bit_length() - 1


# ------------------------------------------------------------------ coder


class RangeEncoder:
    def __init__(self):
        self.low = 0
        self.range = MASK32
        self.cache = 0
        self.cache_size = 1
        self.out = bytearray()

    def _shift_low(self):
        if self.low < 0xFF000000 or self.low > MASK32:
            carry = self.low >> 32
            self.out.append((self.cache + carry) & 0xFF)
            for _ in range(self.cache_size - 1):
                self.out.append((0xFF + carry) & 0xFF)
            self.cache_size = 0
            self.cache = (self.low >> 24) & 0xFF
        self.cache_size += 1
        self.low = (self.low << 8) & MASK32

    def encode_freq(self, start: int, freq: int, bits: int = PRECISION):
        r = self.range >> bits
        self.low += r * start
        self.range = r * freq
        while self.range < TOP:
            self.range <<= 8
            self._shift_low()

    def encode_bits(self, value: int, n: int):
        """Raw ``n``-bit value, uniform probability, 16 bits at a time."""
        while n > 0:
            k = min(n, PRECISION)
            n -= k
            self.encode_freq((value >> n) & ((1 << k) - 1), 1, k)

    def encode(self, symbol: int, table: CdfTable):
        if table.lo <= symbol <= table.hi:
            i = symbol - table.offset
            self.encode_freq(table.cum[i], table.freqs[i])
            return
        e = table.escape
        self.encode_freq(table.cum[e], table.freqs[e])
        sign, value = table._overflow(symbol)
        self.encode_bits(sign, 1)
        m = value + 1
        n = m.bit_length() - 1
        if n > MAX_ESCAPE_BITS:
            raise RangeCoderError(f"symbol {symbol} too far outside table range")
        # unary length one bit at a time: the decoder reads it that way
        for _ in range(n):
            self.encode_bits(0, 1)
        self.encode_bits(1, 1)
        self.encode_bits(m & ((1 << n) - 1), n)

    def finish(self) -> bytes:
        for _ in range(5):
            self._shift_low()
        return bytes(self.out)


class RangeDecoder:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0
        if len(data) < 5:
            raise DecodeError(f"stream of {len(data)} bytes is shorter than the 5-byte flush")
        if data[0] != 0:
            raise DecodeError("stream does not start with the zero cache byte")
        self.range = MASK32
        self.code = int.from_bytes(data[1:5], "big")
        self.pos = 5

    def _next_byte(self) -> int:
        if self.pos >= len(self.data):
            raise DecodeError("truncated stream")
        b = self.data[self.pos]
        self.pos += 1
        return b

    def _normalize(self):
        while self.range < TOP:
            self.code = ((self.code << 8) | self._next_byte()) & MASK32
            self.range <<= 8

    def decode_target(self, bits: int = PRECISION) -> tuple[int, int]:
        r = self.range >> bits
        v = self.code // r
        return min(v, (1 << bits) - 1), r

    def consume(self, r: int, start: int, freq: int):
        self.code -= r * start
        self.range = r * freq
        self._normalize()

    def decode_bits(self, n: int) -> int:
        value = 0
        while n > 0:
            k = min(n, PRECISION)
            n -= k
            v, r = self.decode_target(k)
            self.consume(r, v, 1)
            value = (value << k) | v
        return value

    def decode(self, table: CdfTable) -> int:
        v, r = self.decode_target()
        i = bisect.bisect_right(table.cum, v) - 1
        self.consume(r, table.cum[i], table.freqs[i])
        if i != table.escape:
            return table.offset + i
        sign = self.decode_bits(1)
        n = 0
        while True:
            if self.decode_bits(1):
                break
            n += 1
            if n > MAX_ESCAPE_BITS:
                raise DecodeError("runaway escape code")
        m = (1 << n) | self.decode_bits(n)
        value = m - 1
        return table.lo - value - 1 if sign else table.hi + value + 1

    def check_end(self):
        if self.pos != len(self.data):
            raise DecodeError(f"{len(self.data) - self.pos} unread bytes after the last symbol")
        if self.code != 0:
            raise DecodeError("nonzero residual after the last symbol (corrupt stream)")


def range_encode(symbols, tables) -> bytes:
    """Encode ``symbols[k]`` with ``tables[k]`` (a table or a sequence of tables)."""
    enc = RangeEncoder()
    if isinstance(tables, CdfTable):
        for s in symbols:
            enc.encode(int(s), tables)
    else:
        for s, t in zip(symbols, tables, strict=True):
            enc.encode(int(s), t)
    return enc.finish()


def range_decode(data: bytes, tables, n: int) -> list:
    dec = RangeDecoder(data)
    if isinstance(tables, CdfTable):
        out = [dec.decode(tables) for _ in range(n)]
    else:
        if len(tables) != n:
            raise ValueError(f"{len(tables)} tables for {n} symbols")
        out = [dec.decode(t) for t in tables]
    dec.check_end()
    return out


# --------------------------------------------------------------- tables


def scale_table() -> np.ndarray:
    """64 scales log-spaced over [0.11, 256]."""
    return np.exp(np.linspace(math.log(SCALE_MIN), math.log(SCALE_MAX), SCALE_COUNT))


SCALES = scale_table()


def scale_index(sigma) -> np.ndarray:
    """Index of the smallest table scale ``>= sigma`` (clipped to the last)."""
    s = np.asarray(sigma, dtype=np.float64)
    idx = np.searchsorted(SCALES, s, side="left")
    return np.minimum(idx, SCALE_COUNT - 1)


def _phi(x: float) -> float:
    return 0.5 * math.erfc(-x / math.sqrt(2.0))


def gaussian_table(sigma: float) -> CdfTable:
    """Zero-mean discretized Gaussian over ``+-min(64, ceil(6 sigma))`` plus escape."""
    half = min(MAX_ALPHABET_HALF, math.ceil(6 * sigma))
    pmf = []
    for n in range(-half, half + 1):
        d = abs(n)
        pmf.append(_phi((0.5 - d) / sigma) - _phi((-0.5 - d) / sigma))
    tail = 2 * _phi(-(half + 0.5) / sigma)
    return CdfTable.from_pmf(-half, pmf, tail)


def gaussian_tables() -> list:
    return [gaussian_table(float(s)) for s in SCALES]


def factorized_tables(density, max_half: int = 256) -> list:
    """One table per hyper-latent channel from a ``FactorizedDensity``.

    Support is ``[floor(q_lo), ceil(q_hi)]`` where ``q_lo``/``q_hi`` are the
    2**-17 and 1 - 2**-17 quantiles (so less than 2**-16 mass per side is
    left to the escape bucket), capped to ``max_half`` around the median.
    Evaluated in float64 on a copy so the result depends only on the weights.
    """
    import copy

    import torch

    from .entropy import cdf_difference

    d64 = copy.deepcopy(density).double()
    tail = 2.0 ** -17
    with torch.no_grad():
        q_lo = d64.quantile(tail).numpy()
        q_hi = d64.quantile(1 - tail).numpy()
        med = d64.medians().numpy()
        tables = []
        for c in range(d64.channels):
            m = int(round(float(med[c])))
            lo = max(int(math.floor(q_lo[c])), m - max_half)
            hi = min(int(math.ceil(q_hi[c])), m + max_half)
            if hi < lo:
                lo = hi = m
            grid = torch.arange(lo, hi + 1, dtype=torch.float64)
            full = grid.expand(d64.channels, -1)
            lo_l = d64.logits_cdf(full - 0.5)[c]
            hi_l = d64.logits_cdf(full + 0.5)[c]
            pmf = cdf_difference(lo_l, hi_l).numpy()
            ends = torch.tensor([lo - 0.5, hi + 0.5], dtype=torch.float64).expand(d64.channels, 2)
            edge = d64.logits_cdf(ends)[c]
            tail_mass = float(torch.sigmoid(edge[0]) + torch.sigmoid(-edge[1]))
            if not (pmf > 0).any():
                raise RangeCoderError(f"hyper-latent channel {c}: no probability mass in support")
            tables.append(CdfTable.from_pmf(lo, pmf.tolist(), tail_mass))
    return tables
