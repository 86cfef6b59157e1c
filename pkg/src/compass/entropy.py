"""Range coding of integer latents under per-element integer CDF tables.

Tables cover symbols ``-support..support`` plus one escape slot, with
frequencies summing to ``2**PRECISION``. A symbol outside the support is
coded as the escape slot followed by its overflow magnitude (5-bit length
prefix, then raw bits) and a sign bit.

The coder is a 32-bit carry-less range coder (Subbotin): the interval is
shrunk instead of propagating carries, so every output byte is final.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr

PRECISION = 16
TOTAL = 1 << PRECISION
DEFAULT_SUPPORT = 64

_MASK = 0xFFFFFFFF
_TOP = 1 << 24
_BOT = 1 << 16


class DecodeError(ValueError):
    pass


class RangeEncoder:
    def __init__(self):
        self.low = 0
        self.range = _MASK
        self.out = bytearray()

    def encode(self, cum: int, freq: int, shift: int = PRECISION) -> None:
        r = self.range >> shift
        self.low += r * cum
        self.range = r * freq
        self._normalize()

    def encode_bits(self, value: int, nbits: int) -> None:
        while nbits > 16:
            nbits -= 16
            self.encode((value >> nbits) & 0xFFFF, 1, 16)
        if nbits:
            self.encode(value & ((1 << nbits) - 1), 1, nbits)

    def _normalize(self) -> None:
        low, rng, out = self.low, self.range, self.out
        while True:
            if (low ^ (low + rng)) >= _TOP:
                if rng >= _BOT:
                    break
                rng = (-low) & (_BOT - 1)
            out.append((low >> 24) & 0xFF)
            low = (low << 8) & _MASK
            rng = (rng << 8) & _MASK
        self.low, self.range = low, rng

    def finish(self) -> bytes:
        for _ in range(4):
            self.out.append((self.low >> 24) & 0xFF)
            self.low = (self.low << 8) & _MASK
        return bytes(self.out)


class RangeDecoder:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0
        self.low = 0
        self.range = _MASK
        self.code = 0
        for _ in range(4):
            self.code = (self.code << 8) | self._byte()

    def _byte(self) -> int:
        if self.pos < len(self.data):
            b = self.data[self.pos]
        else:
            b = 0
        self.pos += 1
        return b

    def get_freq(self, shift: int = PRECISION) -> int:
        self._r = self.range >> shift
        v = ((self.code - self.low) & _MASK) // self._r
        return min(v, (1 << shift) - 1)

    def update(self, cum: int, freq: int) -> None:
        r = self._r
        self.low += r * cum
        self.range = r * freq
        low, rng, code = self.low, self.range, self.code
        while True:
            if (low ^ (low + rng)) >= _TOP:
                if rng >= _BOT:
                    break
                rng = (-low) & (_BOT - 1)
            code = ((code << 8) | self._byte()) & _MASK
            low = (low << 8) & _MASK
            rng = (rng << 8) & _MASK
        self.low, self.range, self.code = low, rng, code

    def decode_bits(self, nbits: int) -> int:
        value = 0
        while nbits > 0:
            take = min(nbits, 16)
            nbits -= take
            v = self.get_freq(take)
            self.update(v, 1)
            value = (value << take) | v
        return value

    @property
    def overrun(self) -> int:
        """Bytes consumed beyond the end of the data."""
        return max(0, self.pos - len(self.data))


# --- tables ---------------------------------------------------------------------


@dataclass
class CdfTable:
    """Cumulative integer frequencies, shape (n, 2*support + 3) or (2*support + 3,).

    Column ``k`` is the cumulative count before slot ``k``; slots are symbols
    ``-support..support`` followed by the escape slot.
    """

    cum: np.ndarray
    support: int

    @property
    def escape(self) -> int:
        return 2 * self.support + 1

    def __len__(self) -> int:
        return 1 if self.cum.ndim == 1 else self.cum.shape[0]

    def freqs(self) -> np.ndarray:
        return np.diff(self.cum, axis=-1)


def quantize_pmf(pmf: np.ndarray) -> np.ndarray:
    """Integer frequencies summing to ``TOTAL`` with every slot >= 1.

    ``pmf`` has shape (..., 2S+1); the escape slot receives the leftover
    mass. Frequencies are rounded to nearest, clipped at 1, then the deficit
    (positive or negative) is absorbed by the largest slot (first on ties).
    """
    pmf = np.asarray(pmf, dtype=np.float64)
    tail = np.clip(1.0 - pmf.sum(axis=-1, keepdims=True), 0.0, None)
    probs = np.concatenate([pmf, tail], axis=-1)
    freq = np.maximum(np.rint(probs * TOTAL).astype(np.int64), 1)
    deficit = TOTAL - freq.sum(axis=-1)
    top = np.argmax(freq, axis=-1)
    np.add.at(freq.reshape(-1, freq.shape[-1]), (np.arange(freq.size // freq.shape[-1]), top.reshape(-1)), deficit.reshape(-1))
    if (freq < 1).any():
        raise ValueError("degenerate pmf: renormalization left an empty slot")
    return freq


def cdf_from_pmf(pmf: np.ndarray, support: int) -> CdfTable:
    freq = quantize_pmf(pmf)
    zero = np.zeros(freq.shape[:-1] + (1,), dtype=np.int64)
    return CdfTable(np.concatenate([zero, np.cumsum(freq, axis=-1)], axis=-1), support)


def round_half_away(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    return np.sign(v) * np.floor(np.abs(v) + 0.5)


def gaussian_pmf(offset: np.ndarray, sigma: np.ndarray, support: int) -> np.ndarray:
    """Bin masses of N(offset, sigma^2) at integers -support..support."""
    s = np.arange(-support, support + 1, dtype=np.float64)
    d = np.abs(s[None, :] - np.asarray(offset, dtype=np.float64).reshape(-1, 1))
    sig = np.asarray(sigma, dtype=np.float64).reshape(-1, 1)
    return ndtr((0.5 - d) / sig) - ndtr((-0.5 - d) / sig)


def build_cdf(mu: np.ndarray, sigma: np.ndarray, support: int = DEFAULT_SUPPORT):
    """Per-element tables for Gaussian-distributed integers.

    Each element's table is centred on ``round(mu)``; returns the table and
    the integer centres that must be subtracted from the values before coding.
    """
    mu = np.asarray(mu, dtype=np.float64).reshape(-1)
    sigma = np.asarray(sigma, dtype=np.float64).reshape(-1)
    centers = round_half_away(mu)
    table = cdf_from_pmf(gaussian_pmf(mu - centers, sigma, support), support)
    return table, centers.astype(np.int64)


# --- symbol streams ---------------------------------------------------------------

_LEN_BITS = 5


def encode_into(enc: RangeEncoder, symbols: np.ndarray, table: CdfTable) -> None:
    """Append symbols (already centred) to an open encoder."""
    symbols = np.asarray(symbols, dtype=np.int64).reshape(-1)
    s_max = table.support
    esc = table.escape
    shared = table.cum.ndim == 1
    if shared:
        cum = table.cum.tolist()
    elif len(table) != symbols.size:
        raise ValueError(f"{symbols.size} symbols but {len(table)} tables")
    for i, s in enumerate(symbols.tolist()):
        row = cum if shared else table.cum[i]
        if -s_max <= s <= s_max:
            k = s + s_max
            lo = int(row[k])
            enc.encode(lo, int(row[k + 1]) - lo)
            continue
        lo = int(row[esc])
        enc.encode(lo, int(row[esc + 1]) - lo)
        over = abs(s) - s_max - 1
        nbits = over.bit_length()
        if nbits >= 1 << _LEN_BITS:
            raise ValueError(f"symbol {s} too large to escape-code")
        enc.encode_bits(nbits, _LEN_BITS)
        enc.encode_bits(over, nbits)
        enc.encode_bits(1 if s < 0 else 0, 1)


def decode_from(dec: RangeDecoder, table: CdfTable, count: int) -> np.ndarray:
    s_max = table.support
    esc = table.escape
    shared = table.cum.ndim == 1
    if not shared and len(table) != count:
        raise ValueError(f"{count} symbols requested but {len(table)} tables")
    out = np.empty(count, dtype=np.int64)
    shared_row = table.cum
    for i in range(count):
        row = shared_row if shared else table.cum[i]
        v = dec.get_freq()
        k = int(np.searchsorted(row, v, side="right")) - 1
        lo = int(row[k])
        dec.update(lo, int(row[k + 1]) - lo)
        if k != esc:
            out[i] = k - s_max
            continue
        nbits = dec.decode_bits(_LEN_BITS)
        over = dec.decode_bits(nbits)
        neg = dec.decode_bits(1)
        mag = over + s_max + 1
        out[i] = -mag if neg else mag
    return out


def encode_symbols(symbols: np.ndarray, table: CdfTable) -> bytes:
    enc = RangeEncoder()
    encode_into(enc, symbols, table)
    return enc.finish()


def decode_symbols(data: bytes, table: CdfTable, count: int) -> np.ndarray:
    dec = RangeDecoder(data)
    out = decode_from(dec, table, count)
    if dec.overrun > 4:
        raise DecodeError("symbol stream truncated")
    return out


def ideal_bits(symbols: np.ndarray, table: CdfTable) -> float:
    """Code length of the symbols under the quantized table, escapes included."""
    symbols = np.asarray(symbols, dtype=np.int64).reshape(-1)
    s_max = table.support
    inside = np.abs(symbols) <= s_max
    slot = np.where(inside, symbols + s_max, table.escape)
    freqs = table.freqs()
    f = freqs[slot] if freqs.ndim == 1 else freqs[np.arange(symbols.size), slot]
    bits = float(np.sum(PRECISION - np.log2(f)))
    over = np.abs(symbols[~inside]) - s_max - 1
    if over.size:
        nb = np.floor(np.log2(np.maximum(over, 1))) + 1
        nb[over == 0] = 0
        bits += float(np.sum(_LEN_BITS + nb + 1))
    return bits
