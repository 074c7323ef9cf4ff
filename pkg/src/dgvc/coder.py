"""Quantization and bit-exact adaptive range coding.

The coder is an integer range coder with byte-wise renormalization
(64-bit low accumulator, 32-bit range, carry handled through a cache byte
and a run of pending 0xFF bytes).  Probabilities enter only through
fixed-point CdfTables, so encoder and decoder agree bit-exactly as long
as the table provider is deterministic.

Payload layout: the first payload byte is always the coder's initial
cache byte; the final flush emits five bytes, after which the decoder's
reads line up exactly with the encoder's writes.  See docs/bitstream.md
for the normative description and test vectors.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

_TOP = 1 << 24
_MASK32 = 0xFFFFFFFF


class CoderError(ValueError):
    pass


def inject_noise(v: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Add iid uniform noise from [-1/2, 1/2) to every component."""
    v = np.asarray(v, dtype=np.float64)
    return v + (rng.random(v.shape) - 0.5)


def quantize(v: np.ndarray, bound: int) -> np.ndarray:
    """Round half away from zero, then clamp to [-bound, bound]."""
    v = np.asarray(v, dtype=np.float64)
    r = np.copysign(np.floor(np.abs(v) + 0.5), v)
    return np.clip(r, -bound, bound).astype(np.int64)


@dataclass(frozen=True)
class CdfTable:
    """Fixed-point cumulative counts over an alphabet of size A.

    cum has A+1 entries, strictly increasing from 0 to 2**precision, so
    every symbol has mass at least one count.
    """

    cum: np.ndarray
    precision: int

    def __post_init__(self):
        cum = np.asarray(self.cum, dtype=np.int64)
        object.__setattr__(self, "cum", cum)
        if cum[0] != 0 or cum[-1] != (1 << self.precision):
            raise CoderError(f"cdf endpoints must be 0 and 2^{self.precision}")
        if np.any(np.diff(cum) < 1):
            raise CoderError("cdf must be strictly increasing (mass >= 1 count per symbol)")

    @property
    def alphabet_size(self) -> int:
        return len(self.cum) - 1


def build_cdf_table(pmf: np.ndarray, precision: int = 16) -> CdfTable:
    """Apportion 2**precision counts to pmf by largest remainder.

    Every symbol receives at least one count so that clamped outliers stay
    decodable; remainder ties go to the lower symbol index.
    """
    pmf = np.asarray(pmf, dtype=np.float64)
    if pmf.ndim != 1 or len(pmf) < 1:
        raise CoderError("pmf must be a non-empty vector")
    if np.any(pmf < 0):
        raise CoderError("pmf entries must be nonnegative")
    s = pmf.sum()
    if abs(s - 1.0) > 1e-6:
        raise CoderError(f"pmf must sum to 1 within 1e-6, got {s}")
    total = 1 << precision
    if total < len(pmf):
        raise CoderError("precision too small for alphabet")
    quota = pmf / s * total
    counts = np.floor(quota).astype(np.int64)
    rem = quota - counts
    deficit = total - int(counts.sum())
    if deficit > 0:
        order = np.argsort(-rem, kind="stable")
        counts[order[:deficit]] += 1
    elif deficit < 0:
        # float-rounding edge: retract from the smallest remainders, never below 1
        order = np.argsort(rem, kind="stable")
        for i in order:
            if deficit == 0:
                break
            if counts[i] > 1:
                counts[i] -= 1
                deficit += 1
    # per-symbol floor: pull counts from the currently largest symbol
    for i in np.flatnonzero(counts == 0):
        j = int(np.argmax(counts))
        counts[j] -= 1
        counts[i] = 1
    cum = np.zeros(len(pmf) + 1, dtype=np.int64)
    np.cumsum(counts, out=cum[1:])
    return CdfTable(cum=cum, precision=precision)


TableProvider = Callable[[Sequence[int]], CdfTable]


class RangeEncoder:
    """Carry-aware byte-renormalizing range encoder."""

    def __init__(self):
        self.low = 0
        self.range = _MASK32
        self.cache = 0
        self.cache_size = 1
        self.out = bytearray()

    def bytes_emitted(self) -> int:
        return len(self.out)

    def _shift_low(self) -> None:
        if self.low < 0xFF000000 or self.low > _MASK32:
            carry = self.low >> 32
            self.out.append((self.cache + carry) & 0xFF)
            for _ in range(self.cache_size - 1):
                self.out.append((0xFF + carry) & 0xFF)
            self.cache = (self.low >> 24) & 0xFF
            self.cache_size = 0
        self.cache_size += 1
        self.low = (self.low << 8) & _MASK32

    def encode(self, cum_lo: int, cum_hi: int, precision: int) -> None:
        r = self.range >> precision
        self.low += r * cum_lo
        self.range = r * (cum_hi - cum_lo)
        while self.range < _TOP:
            self.range <<= 8
            self._shift_low()

    def finish(self) -> bytes:
        for _ in range(5):
            self._shift_low()
        return bytes(self.out)


class RangeDecoder:
    def __init__(self, data: bytes):
        self._data = data
        self._pos = 0
        self.range = _MASK32
        self._next_byte()  # leading cache byte
        self.code = 0
        for _ in range(4):
            self.code = (self.code << 8) | self._next_byte()
        self._r = 0

    def _next_byte(self) -> int:
        if self._pos >= len(self._data):
            raise CoderError("truncated payload")
        b = self._data[self._pos]
        self._pos += 1
        return b

    def decode_target(self, precision: int) -> int:
        self._r = self.range >> precision
        v = self.code // self._r
        total = 1 << precision
        return total - 1 if v >= total else v

    def decode_update(self, cum_lo: int, cum_hi: int) -> None:
        self.code -= self._r * cum_lo
        self.range = self._r * (cum_hi - cum_lo)
        while self.range < _TOP:
            self.code = ((self.code << 8) | self._next_byte()) & _MASK32
            self.range <<= 8


def ac_encode(symbols: Sequence[int], provider: TableProvider) -> bytes:
    """Encode index symbols using per-position tables from the provider.

    The provider is called with exactly the prefix of symbols already
    encoded; it must be a pure function of that history.
    """
    enc = RangeEncoder()
    history: list[int] = []
    for s in symbols:
        s = int(s)
        table = provider(history)
        if not 0 <= s < table.alphabet_size:
            raise CoderError(f"symbol {s} outside alphabet of size {table.alphabet_size}")
        enc.encode(int(table.cum[s]), int(table.cum[s + 1]), table.precision)
        history.append(s)
    return enc.finish()


def ac_decode(data: bytes, n_symbols: int, provider: TableProvider) -> list[int]:
    """Exact inverse of ac_encode for the same deterministic provider."""
    dec = RangeDecoder(data)
    history: list[int] = []
    for _ in range(n_symbols):
        table = provider(history)
        v = dec.decode_target(table.precision)
        s = int(np.searchsorted(table.cum, v, side="right")) - 1
        dec.decode_update(int(table.cum[s]), int(table.cum[s + 1]))
        history.append(s)
    return history


class SectionedEncoder:
    """Range encoder with byte-position snapshots for per-section accounting.

    Sections are not byte-aligned; a section's bit count is the number of
    bytes the encoder emitted while it was open (times 8), with the final
    flush attributed to the last section, so the per-section bits sum
    exactly to the payload size.
    """

    def __init__(self):
        self._enc = RangeEncoder()
        self._marks: list[int] = []
        self._history: list[int] = []

    @property
    def history(self) -> list[int]:
        return self._history

    def encode_symbol(self, s: int, table: CdfTable) -> None:
        if not 0 <= s < table.alphabet_size:
            raise CoderError(f"symbol {s} outside alphabet of size {table.alphabet_size}")
        self._enc.encode(int(table.cum[s]), int(table.cum[s + 1]), table.precision)
        self._history.append(s)

    def end_section(self) -> None:
        self._marks.append(self._enc.bytes_emitted())

    def finish(self) -> tuple[bytes, list[int]]:
        data = self._enc.finish()
        if not self._marks:
            return data, []
        bounds = self._marks[:-1] + [len(data)]
        bits = []
        prev = 0
        for b in bounds:
            bits.append(8 * (b - prev))
            prev = b
        return data, bits
