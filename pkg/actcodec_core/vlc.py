"""
Variable length coding of quantizer bin indices.

Canonical Huffman codes: only code lengths are stored, codes are assigned in
(length, symbol) order. Bits are packed MSB-first and zero-padded to a byte.
An optional escape code, followed by a raw 32-bit two's complement value,
covers symbols that were absent from the calibration histogram.
"""

import heapq
import logging
import math
import struct
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from actcodec_core.errors import CorruptStream, Truncated, ValidationError

logger = logging.getLogger(__name__)

ESCAPE_RAW_BITS = 32
MAX_CODE_LENGTH = 63
TABLE_BITS = 16
_PACK_CHUNK = 1 << 16
_WINDOW_SEGMENT = 1 << 18
_CODEBOOK_HEADER = struct.Struct("<iI")


@dataclass(frozen=True)
class SymbolHistogram:
    min_symbol: int
    counts: np.ndarray

    def __post_init__(self):
        counts = np.asarray(self.counts, dtype=np.int64)
        if counts.ndim != 1 or counts.size == 0:
            raise ValidationError("histogram needs a non-empty 1-D count vector")
        if (counts < 0).any():
            raise ValidationError("histogram counts must be non-negative")
        if counts.sum() == 0:
            raise ValidationError("histogram has no observations")
        object.__setattr__(self, "counts", counts)
        object.__setattr__(self, "min_symbol", int(self.min_symbol))

    @classmethod
    def from_symbols(cls, symbols):
        symbols = np.asarray(symbols, dtype=np.int64).reshape(-1)
        if symbols.size == 0:
            raise ValidationError("cannot build a histogram from zero symbols")
        low = int(symbols.min())
        return cls(low, np.bincount(symbols - low))

    @property
    def max_symbol(self) -> int:
        return self.min_symbol + self.counts.size - 1

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def probabilities(self) -> np.ndarray:
        return self.counts / self.total


def entropy(h: SymbolHistogram) -> float:
    """Shannon entropy -sum p log2 p in bits per symbol."""
    p = h.probabilities()
    p = p[p > 0]
    return float(-(p * np.log2(p)).sum()) + 0.0


@dataclass(frozen=True)
class BitStream:
    data: bytes
    bit_count: int

    def __post_init__(self):
        if not 0 <= self.bit_count <= 8 * len(self.data):
            raise ValidationError(f"bit count {self.bit_count} exceeds {8 * len(self.data)} available bits")


class BitReader:
    """MSB-first bit reader over a byte string."""

    def __init__(self, data: bytes, bit_limit=None):
        self.data = data
        self.limit = 8 * len(data) if bit_limit is None else bit_limit
        self.pos = 0

    def read_bits(self, nbits: int) -> int:
        if self.pos + nbits > self.limit:
            raise Truncated("bit stream exhausted early")
        result = 0
        for _ in range(nbits):
            byte = self.data[self.pos >> 3]
            result = (result << 1) | ((byte >> (7 - (self.pos & 7))) & 1)
            self.pos += 1
        return result


@dataclass(frozen=True)
class HuffmanCodebook:
    """Canonical prefix code over symbols ``symbol_min .. symbol_min + span``.

    ``lengths[i]`` is the code length of symbol ``symbol_min + i`` (0 = no
    code); ``escape_length`` is 0 when there is no escape code.
    """

    symbol_min: int
    lengths: np.ndarray
    escape_length: int = 0
    codes: np.ndarray = field(init=False, repr=False, compare=False)
    escape_code: int = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        lengths = np.asarray(self.lengths, dtype=np.int64)
        if lengths.ndim != 1 or lengths.size == 0:
            raise ValidationError("codebook needs at least one symbol slot")
        if (lengths < 0).any() or lengths.max(initial=0) > MAX_CODE_LENGTH or self.escape_length > MAX_CODE_LENGTH:
            raise ValidationError(f"code lengths must lie in 0..{MAX_CODE_LENGTH}")
        object.__setattr__(self, "lengths", lengths)
        object.__setattr__(self, "symbol_min", int(self.symbol_min))
        object.__setattr__(self, "escape_length", int(self.escape_length))
        if self.escape_length == 0 and not (lengths > 0).any() and lengths.size != 1:
            raise ValidationError("a single-symbol codebook must span exactly one symbol")

        codes = np.zeros(lengths.size, dtype=np.uint64)
        escape_code = 0
        slots = [(int(l), i) for i, l in enumerate(lengths) if l > 0]
        if self.escape_length > 0:
            slots.append((self.escape_length, lengths.size))
        code, previous = 0, 0
        for length, index in sorted(slots):
            code <<= length - previous
            if index == lengths.size:
                escape_code = code
            else:
                codes[index] = code
            code += 1
            previous = length
        object.__setattr__(self, "codes", codes)
        object.__setattr__(self, "escape_code", escape_code)

    @property
    def span(self) -> int:
        return self.lengths.size - 1

    @property
    def has_escape(self) -> bool:
        return self.escape_length > 0

    @property
    def is_single_symbol(self) -> bool:
        return not self.has_escape and int((self.lengths > 0).sum()) == 0

    def coded_lengths(self) -> np.ndarray:
        lengths = self.lengths[self.lengths > 0]
        if self.has_escape:
            lengths = np.append(lengths, self.escape_length)
        return lengths

    def kraft_sum(self) -> float:
        return float(np.exp2(-self.coded_lengths().astype(np.float64)).sum())

    def to_bytes(self) -> bytes:
        return (
            _CODEBOOK_HEADER.pack(self.symbol_min, self.span)
            + self.lengths.astype(np.uint8).tobytes()
            + bytes([self.escape_length])
        )

    @classmethod
    def from_bytes(cls, raw, offset=0):
        """Parse a codebook at ``offset``; returns ``(codebook, next_offset)``."""
        if len(raw) < offset + _CODEBOOK_HEADER.size:
            raise Truncated("codebook header is truncated")
        symbol_min, span = _CODEBOOK_HEADER.unpack_from(raw, offset)
        start = offset + _CODEBOOK_HEADER.size
        end = start + span + 2
        if len(raw) < end:
            raise Truncated("codebook lengths are truncated")
        lengths = np.frombuffer(raw[start:end - 1], dtype=np.uint8).astype(np.int64)
        try:
            codebook = cls(symbol_min, lengths, raw[end - 1])
        except ValidationError as exc:
            raise CorruptStream(f"bad codebook: {exc}") from exc
        coded = codebook.coded_lengths()
        if coded.size > 1 and not math.isclose(codebook.kraft_sum(), 1.0, abs_tol=1e-12):
            raise CorruptStream(f"codebook lengths violate Kraft equality (sum {codebook.kraft_sum()})")
        return codebook, end


def build_codebook(h: SymbolHistogram, escape=False) -> HuffmanCodebook:
    """Optimal prefix code for ``h``; heap ties break on (count, symbol index).

    With ``escape`` an extra escape slot of count 1 is coded after the last
    symbol. A single coded symbol gets length 0 and an empty payload.
    """
    counts = h.counts
    weights = [(int(c), i) for i, c in enumerate(counts) if c > 0]
    if escape:
        weights.append((1, counts.size))
    depth = {i: 0 for _, i in weights}

    if len(weights) > 1:
        heap = [(count, index, [index]) for count, index in weights]
        heapq.heapify(heap)
        while len(heap) > 1:
            c1, i1, leaves1 = heapq.heappop(heap)
            c2, i2, leaves2 = heapq.heappop(heap)
            for leaf in leaves1:
                depth[leaf] += 1
            for leaf in leaves2:
                depth[leaf] += 1
            heapq.heappush(heap, (c1 + c2, min(i1, i2), leaves1 + leaves2))

    if len(weights) == 1 and not escape:
        return HuffmanCodebook(h.min_symbol + weights[0][1], np.zeros(1, dtype=np.int64))

    lengths = np.zeros(counts.size, dtype=np.int64)
    for index, d in depth.items():
        if index < counts.size:
            lengths[index] = d
    return HuffmanCodebook(h.min_symbol, lengths, depth.get(counts.size, 0))


def _codes_for(symbols, codebook):
    """(code, length) of every symbol, plus the raw escape payload items."""
    offsets = symbols - codebook.symbol_min
    in_range = (offsets >= 0) & (offsets <= codebook.span)
    safe = np.where(in_range, offsets, 0)
    lengths = np.where(in_range, codebook.lengths[safe], 0)
    codes = np.where(in_range, codebook.codes[safe], np.uint64(0))
    missing = lengths == 0
    if codebook.is_single_symbol:
        missing = symbols != codebook.symbol_min
    raw = np.zeros(symbols.size, dtype=np.uint64)
    raw_len = np.zeros(symbols.size, dtype=np.int64)
    if codebook.is_single_symbol:
        if missing.any():
            raise ValidationError(f"symbol {int(symbols[missing][0])} has no code")
        return codes, lengths, raw, raw_len
    if missing.any():
        if not codebook.has_escape:
            raise ValidationError(f"symbol {int(symbols[missing][0])} has no code")
        escaped = symbols[missing]
        if (escaped < -(2 ** 31)).any() or (escaped >= 2 ** 31).any():
            raise ValidationError("escaped symbol does not fit in 32 bits")
        codes[missing] = np.uint64(codebook.escape_code)
        lengths[missing] = codebook.escape_length
        raw[missing] = (escaped & 0xFFFFFFFF).astype(np.uint64)
        raw_len[missing] = ESCAPE_RAW_BITS
        logger.debug("escaping %d symbols absent from the codebook", int(missing.sum()))
    return codes, lengths, raw, raw_len


def _expand_bits(codes, lengths):
    total = int(lengths.sum())
    if total == 0:
        return np.zeros(0, dtype=np.uint8)
    owner = np.repeat(np.arange(lengths.size), lengths)
    starts = np.cumsum(lengths) - lengths
    position = np.arange(total) - starts[owner]
    shift = (lengths[owner] - 1 - position).astype(np.uint64)
    return ((codes[owner] >> shift) & np.uint64(1)).astype(np.uint8)


def _encode_cyclic(symbols, codebooks):
    """Symbol i is coded with ``codebooks[i % len(codebooks)]``."""
    period = len(codebooks)
    if symbols.size == 0:
        return BitStream(b"", 0)
    if symbols.size % period:
        raise ValidationError(f"{symbols.size} symbols do not fill whole rows of {period} codebooks")
    rows = symbols.reshape(-1, period)
    chunk = max(1, _PACK_CHUNK // period)
    pieces = []
    for start in range(0, rows.shape[0], chunk):
        block = rows[start:start + chunk]
        parts = [_codes_for(block[:, j], codebook) for j, codebook in enumerate(codebooks)]
        # (rows, period, 2) ordering keeps block order with each raw escape value after its code.
        codes = np.stack([np.stack([p[0], p[2]], axis=1) for p in parts], axis=1).reshape(-1)
        lengths = np.stack([np.stack([p[1], p[3]], axis=1) for p in parts], axis=1).reshape(-1)
        pieces.append(_expand_bits(codes, lengths))
    bits = np.concatenate(pieces)
    return BitStream(np.packbits(bits).tobytes(), int(bits.size))


def encode(symbols, codebook: HuffmanCodebook) -> BitStream:
    """Concatenate the codes of ``symbols`` in order."""
    return _encode_cyclic(np.asarray(symbols, dtype=np.int64).reshape(-1), [codebook])


def encode_blocks(symbols, codebooks) -> BitStream:
    """Encode an (blocks, t) symbol array in block order, column j with ``codebooks[j]``."""
    symbols = np.atleast_2d(np.asarray(symbols, dtype=np.int64))
    if symbols.shape[1] != len(codebooks):
        raise ValidationError(f"{symbols.shape[1]} symbol columns but {len(codebooks)} codebooks")
    return _encode_cyclic(symbols.reshape(-1), list(codebooks))


def _to_signed32(value):
    return value - (1 << 32) if value >= 1 << 31 else value


def _check_tail(bits, pos, available):
    if available - pos >= 8 or bits[pos:available].any():
        raise CorruptStream("non-zero or excess padding after the last symbol")


def _windows(padded, start, stop, width):
    """Integer value of the ``width`` bits starting at every position in [start, stop)."""
    windows = np.zeros(stop - start, dtype=np.int64)
    for j in range(width):
        windows = (windows << 1) | padded[start + j:stop + j]
    return windows.tolist()


class _LookupTable:
    """Direct-indexed decoding table over the next ``width`` bits."""

    def __init__(self, codebook):
        self.base = codebook.symbol_min
        self.escape = codebook.span + 1
        self.single = codebook.is_single_symbol
        self.width = 0 if self.single else int(codebook.coded_lengths().max())
        entries = [(i, int(l), int(c)) for i, (l, c) in enumerate(zip(codebook.lengths, codebook.codes)) if l > 0]
        if codebook.has_escape:
            entries.append((self.escape, codebook.escape_length, codebook.escape_code))
        self.sym = [-1] * (1 << self.width)
        self.length = [0] * (1 << self.width)
        for index, bits, code in entries:
            lo, hi = code << (self.width - bits), (code + 1) << (self.width - bits)
            self.sym[lo:hi] = [index] * (hi - lo)
            self.length[lo:hi] = [bits] * (hi - lo)


@lru_cache(maxsize=1024)
def _cached_table(symbol_min, lengths, escape_length):
    return _LookupTable(HuffmanCodebook(symbol_min, np.frombuffer(lengths, dtype=np.int64), escape_length))


def _lookup_table(codebook) -> _LookupTable:
    """Table for ``codebook``, built on its first decode and shared by equal codebooks."""
    return _cached_table(codebook.symbol_min, codebook.lengths.tobytes(), codebook.escape_length)


def _decode_table(bits, limit, codebooks, count):
    tables = [_lookup_table(codebook) for codebook in codebooks]
    period = len(tables)
    width = max(table.width for table in tables)
    padded = np.concatenate([bits[:limit], np.zeros(width, dtype=np.uint8)])
    out = np.empty(count, dtype=np.int64)
    pos = 0
    seg_start, seg_stop, windows = 0, 0, []
    for i in range(count):
        table = tables[i % period]
        if table.single:
            out[i] = table.base
            continue
        if pos >= limit:
            raise Truncated("bit stream exhausted early")
        if pos >= seg_stop:
            seg_start, seg_stop = pos, min(pos + _WINDOW_SEGMENT, limit)
            windows = _windows(padded, seg_start, seg_stop, width)
        w = windows[pos - seg_start] >> (width - table.width)
        index = table.sym[w]
        if index < 0:
            raise CorruptStream(f"invalid code at bit {pos}")
        pos += table.length[w]
        if pos > limit:
            raise Truncated("bit stream exhausted early")
        if index == table.escape:
            if pos + ESCAPE_RAW_BITS > limit:
                raise Truncated("escape value runs past the end of the stream")
            raw = int(np.packbits(bits[pos:pos + ESCAPE_RAW_BITS]).view(">u4")[0])
            out[i] = _to_signed32(raw)
            pos += ESCAPE_RAW_BITS
        else:
            out[i] = table.base + index
    return out, pos


class _CanonicalTable:
    """First-code / count tables for bit-by-bit canonical decoding."""

    def __init__(self, codebook):
        self.base = codebook.symbol_min
        self.escape = codebook.span + 1
        self.single = codebook.is_single_symbol
        slots = sorted(
            [(int(l), i) for i, l in enumerate(codebook.lengths) if l > 0]
            + ([(codebook.escape_length, self.escape)] if codebook.has_escape else [])
        )
        self.slots = slots
        self.max_len = slots[-1][0] if slots else 0
        self.first_code = [0] * (self.max_len + 1)
        self.per_length = [0] * (self.max_len + 1)
        self.first_slot = [0] * (self.max_len + 1)
        for length, _ in slots:
            self.per_length[length] += 1
        code, cursor = 0, 0
        for length in range(1, self.max_len + 1):
            self.first_code[length] = code
            self.first_slot[length] = cursor
            code = (code + self.per_length[length]) << 1
            cursor += self.per_length[length]


def _decode_canonical(data, limit, codebooks, count):
    """Bit-by-bit canonical decoding for codes longer than the lookup table."""
    tables = [_CanonicalTable(codebook) for codebook in codebooks]
    period = len(tables)
    reader = BitReader(data, limit)
    out = np.empty(count, dtype=np.int64)
    for i in range(count):
        table = tables[i % period]
        if table.single:
            out[i] = table.base
            continue
        code = 0
        for length in range(1, table.max_len + 1):
            code = (code << 1) | reader.read_bits(1)
            offset = code - table.first_code[length]
            if 0 <= offset < table.per_length[length]:
                index = table.slots[table.first_slot[length] + offset][1]
                break
        else:
            raise CorruptStream(f"invalid code at bit {reader.pos}")
        if index == table.escape:
            out[i] = _to_signed32(reader.read_bits(ESCAPE_RAW_BITS))
        else:
            out[i] = table.base + index
    return out, reader.pos


def _decode_cyclic(stream, codebooks, count):
    if count < 0:
        raise ValidationError(f"symbol count must be non-negative, got {count}")
    if count % len(codebooks):
        raise CorruptStream(f"{count} symbols do not fill whole rows of {len(codebooks)} codebooks")
    bits = np.unpackbits(np.frombuffer(stream.data, dtype=np.uint8))
    longest = max(int(c.coded_lengths().max(initial=0)) for c in codebooks)
    if longest <= TABLE_BITS:
        out, pos = _decode_table(bits, stream.bit_count, codebooks, count)
    else:
        out, pos = _decode_canonical(stream.data, stream.bit_count, codebooks, count)
    _check_tail(bits, pos, bits.size)
    return out


def decode(stream: BitStream, codebook: HuffmanCodebook, count: int) -> np.ndarray:
    """Inverse of :func:`encode`; ``count`` comes from the container header."""
    return _decode_cyclic(stream, [codebook], count)


def decode_blocks(stream: BitStream, codebooks, blocks: int) -> np.ndarray:
    """Inverse of :func:`encode_blocks`; returns a (blocks, len(codebooks)) array."""
    codebooks = list(codebooks)
    return _decode_cyclic(stream, codebooks, blocks * len(codebooks)).reshape(blocks, len(codebooks))


def average_rate(codebook: HuffmanCodebook, h: SymbolHistogram) -> float:
    """Expected code length in bits per symbol of ``h`` under ``codebook``."""
    symbols = np.arange(h.counts.size) + h.min_symbol
    present = h.counts > 0
    codes, lengths, _, raw_len = _codes_for(symbols[present], codebook)
    weights = h.counts[present] / h.total
    return float((weights * (lengths + raw_len)).sum())


@dataclass(frozen=True)
class TreeBalance:
    max_len: int
    min_len: int
    length_histogram: dict

    @property
    def spread(self) -> int:
        return self.max_len - self.min_len


def tree_balance(codebook: HuffmanCodebook) -> TreeBalance:
    """Code-length spread of the data symbols (escape excluded)."""
    lengths = codebook.lengths[codebook.lengths > 0]
    if lengths.size == 0:
        return TreeBalance(0, 0, {0: 1})
    values, counts = np.unique(lengths, return_counts=True)
    return TreeBalance(int(values.max()), int(values.min()), {int(v): int(c) for v, c in zip(values, counts)})
