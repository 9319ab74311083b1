"""Bit-accurate stochastic-computing simulation.

Values in [0, 1] are encoded as unipolar bitstreams by comparing an LFSR state
sequence against a threshold. Multiplication is bitwise AND, accumulation is
bitwise OR. Signed weights use split-unipolar streams: positive and negative
weights are accumulated into separate OR trees and the decoded difference is
the layer output.

Streams of up to 64 bits are packed into one ``uint64`` word, bit ``i`` being
clock cycle ``i``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import counters
from .rng import mix
from .tensor.functional import check_conv_shapes, im2col

# two maximal-length tap masks per width (taps numbered from 1; tap t is bit t-1)
DEFAULT_TAPS = {
    3: (0x6, 0x5),
    4: (0xC, 0x9),
    5: (0x14, 0x12),
    6: (0x30, 0x21),
    7: (0x41, 0x44),
    8: (0x8E, 0x95),
    16: (0xD008, 0xB400),
}
STREAM_LENGTHS = (8, 16, 32, 64)
_MAX_CHUNK = 1 << 22  # uint64 elements per AND/OR temporary


def _parity(x: int) -> int:
    return bin(x).count("1") & 1


@lru_cache(maxsize=None)
def _orbit(width: int, taps: int) -> tuple[np.ndarray, np.ndarray]:
    """State sequence starting from 1, plus the inverse map state -> position."""
    mask = (1 << width) - 1
    states = []
    s = 1
    while True:
        states.append(s)
        s = ((s << 1) | _parity(s & taps)) & mask
        if s == 1 or len(states) > mask:
            break
    orbit = np.array(states, dtype=np.int64)
    position = np.full(mask + 1, -1, dtype=np.int64)
    position[orbit] = np.arange(orbit.size)
    return orbit, position


@dataclass(frozen=True)
class LfsrConfig:
    """Fibonacci LFSR: feedback = parity(state & taps), shifted in at bit 0."""

    width: int = 5
    taps: int = 0x14
    seed: int = 1

    def __post_init__(self):
        if not 2 <= self.width <= 32:
            raise ValueError(f"LFSR width must be in [2, 32], got {self.width}")
        mask = (1 << self.width) - 1
        if self.seed == 0 or self.seed & ~mask:
            raise ValueError(f"seed must be a nonzero {self.width}-bit value, got {self.seed}")
        if not 0 < self.taps <= mask or not self.taps >> (self.width - 1):
            raise ValueError(f"tap mask {self.taps:#x} must include bit {self.width - 1}")
        if self.width <= 16 and self.period_found() != self.period:
            raise ValueError(f"taps {self.taps:#x} are not maximal-length for width {self.width}")

    @property
    def period(self) -> int:
        return (1 << self.width) - 1

    def period_found(self) -> int:
        return _orbit(self.width, self.taps)[0].size

    @classmethod
    def default(cls, width: int = 5, which: int = 0, seed: int = 1) -> "LfsrConfig":
        return cls(width=width, taps=DEFAULT_TAPS[width][which], seed=seed)


def lfsr_next(state: int, cfg: LfsrConfig) -> int:
    if state == 0:
        raise ValueError("LFSR state 0 is a fixed point")
    return ((state << 1) | _parity(state & cfg.taps)) & cfg.period


@dataclass(frozen=True)
class PackedStream:
    bits: np.ndarray  # uint64 words
    length: int = 32

    def __post_init__(self):
        words = np.atleast_1d(np.asarray(self.bits, dtype=np.uint64))
        object.__setattr__(self, "bits", words)
        if words.size != -(-self.length // 64):
            raise ValueError(f"{self.length}-bit stream needs {-(-self.length // 64)} words, got {words.size}")
        tail = self.length % 64
        if tail and int(words[-1]) >> tail:
            raise ValueError("bits set beyond the stream length")

    def popcount(self) -> int:
        return int(np.bitwise_count(self.bits).sum())

    def decode(self) -> float:
        return self.popcount() / self.length

    def to_bits(self) -> np.ndarray:
        out = np.unpackbits(self.bits.view(np.uint8), bitorder="little")
        return out[: self.length]


def _threshold(values: np.ndarray, width: int) -> np.ndarray:
    # round half away from zero; values are non-negative here
    return np.floor(values * ((1 << width) - 1) + 0.5).astype(np.int64)


def encoded_probability(v, width: int):
    """Per-cycle probability of a 1 for value ``v`` under a full-period seed average."""
    v = np.asarray(v, dtype=np.float64)
    return _threshold(v, width) / ((1 << width) - 1)


def encode_words(values, start_positions, length: int, width: int, taps: int) -> np.ndarray:
    """Vectorised encoder: one packed word per value.

    ``start_positions`` index into the LFSR orbit (position 0 is state 1), so a
    stream starting at position ``p`` uses states ``orbit[p], orbit[p+1], ...``.
    """
    values = np.asarray(values, dtype=np.float64)
    if values.size and (values.min() < 0 or values.max() > 1):
        raise ValueError(
            f"stream values must lie in [0, 1], got range [{values.min()}, {values.max()}]; pre-scale first"
        )
    if length > 64:
        raise ValueError("packed kernels support streams of at most 64 bits")
    orbit, _ = _orbit(width, taps)
    period = orbit.size
    flat = values.reshape(-1)
    starts = np.broadcast_to(np.asarray(start_positions, dtype=np.int64), values.shape).reshape(-1)
    thr = _threshold(flat, width)
    states = orbit[(starts[:, None] + np.arange(length)) % period]
    bits = states <= thr[:, None]
    packed = np.packbits(bits, axis=1, bitorder="little")
    padded = np.zeros((flat.size, 8), dtype=np.uint8)
    padded[:, : packed.shape[1]] = packed
    return padded.view("<u8").reshape(values.shape).astype(np.uint64)


def encode_stream(v: float, length: int = 32, lfsr: LfsrConfig | None = None) -> PackedStream:
    """Encode ``v`` with ``length`` consecutive states starting at ``lfsr.seed``.

    Bit ``i`` is 1 iff ``state_i <= round(v * (2**width - 1))``.
    """
    lfsr = lfsr or LfsrConfig.default(_default_width(length))
    if not 0.0 <= v <= 1.0:
        raise ValueError(f"stream value {v} outside [0, 1]")
    _, position = _orbit(lfsr.width, lfsr.taps)
    word = encode_words(np.array([v]), position[lfsr.seed], length, lfsr.width, lfsr.taps)
    return PackedStream(word, length)


def sc_mul(a: PackedStream, b: PackedStream) -> PackedStream:
    if a.length != b.length:
        raise ValueError(f"stream length mismatch: {a.length} vs {b.length}")
    return PackedStream(a.bits & b.bits, a.length)


def sc_or_accumulate(streams) -> PackedStream:
    streams = list(streams)
    if not streams:
        raise ValueError("OR accumulation needs at least one stream")
    length = streams[0].length
    acc = np.zeros_like(streams[0].bits)
    for s in streams:
        if s.length != length:
            raise ValueError(f"stream length mismatch: {s.length} vs {length}")
        acc = acc | s.bits
    return PackedStream(acc, length)


def expected_or(values) -> float:
    """Mean of an OR of independent streams: ``1 - prod(1 - a_i)``."""
    vals = np.asarray(list(values) if not isinstance(values, np.ndarray) else values, dtype=np.float64)
    if vals.size and (vals.min() < 0 or vals.max() > 1):
        raise ValueError("expected_or values must lie in [0, 1]")
    return float(1.0 - np.prod(1.0 - vals))


def _default_width(length: int) -> int:
    return int(math.log2(length))


@dataclass(frozen=True)
class ScConfig:
    """Stream length, the two LFSRs (activations / weights), and the stream seed base.

    The default LFSR width is log2(stream_length): a full LFSR period then
    nearly covers the stream, so one stream encodes its value to within about
    one bit.
    """

    stream_length: int = 32
    input_lfsr: LfsrConfig | None = None
    weight_lfsr: LfsrConfig | None = None
    base_seed: int = 1
    value_scale: float = 1.0

    def __post_init__(self):
        if self.stream_length not in STREAM_LENGTHS:
            raise ValueError(f"stream_length must be one of {STREAM_LENGTHS}, got {self.stream_length}")
        width = _default_width(self.stream_length)
        inp = self.input_lfsr or LfsrConfig.default(width, 0)
        wgt = self.weight_lfsr or LfsrConfig.default(inp.width, 1)
        if (inp.taps, inp.seed, inp.width) == (wgt.taps, wgt.seed, wgt.width):
            raise ValueError("input and weight LFSRs must differ in taps or seed")
        if self.value_scale <= 0:
            raise ValueError("value_scale must be positive")
        object.__setattr__(self, "input_lfsr", inp)
        object.__setattr__(self, "weight_lfsr", wgt)


INPUT_ROLE, WEIGHT_ROLE = 0, 1


def stream_starts(cfg: ScConfig, layer_id: int, role: int, count: int) -> np.ndarray:
    """Orbit start position per element: a hash of (base seed, layer, role, index)."""
    lfsr = cfg.input_lfsr if role == INPUT_ROLE else cfg.weight_lfsr
    h = mix(cfg.base_seed, layer_id, role, np.arange(count, dtype=np.int64))
    return (h % np.uint64(lfsr.period)).astype(np.int64)


def _or_count(cols: np.ndarray, wstreams: np.ndarray) -> np.ndarray:
    """``popcount(OR_q (cols[r, q] & w[k, q]))`` for every row r and filter k."""
    rows, q = cols.shape
    k = wstreams.shape[0]
    out = np.empty((rows, k), dtype=np.int64)
    step = max(1, _MAX_CHUNK // max(1, k * q))
    for start in range(0, rows, step):
        chunk = cols[start:start + step]
        prod = chunk[:, None, :] & wstreams[None, :, :]
        out[start:start + step] = np.bitwise_count(np.bitwise_or.reduce(prod, axis=2))
    counters.bump("sc_bit_ops", rows * k * q)
    return out


def sc_split_conv_counts(xs, wpos, wneg, cfg: ScConfig, stride: int = 1, pad: int = 0, layer_id: int = 0):
    """Popcounts of the positive and negative OR trees of a split-unipolar conv.

    ``xs`` (activations) and ``wpos``/``wneg`` (weight magnitudes) must already
    be scaled into [0, 1]. Returns two int arrays ``[N, K, Ho, Wo]``.
    """
    xs = np.asarray(xs, dtype=np.float64)
    wpos = np.asarray(wpos, dtype=np.float64)
    wneg = np.asarray(wneg, dtype=np.float64)
    check_conv_shapes(xs, wpos, None, stride, pad)
    if wpos.shape != wneg.shape:
        raise ValueError("positive and negative weight tensors must share a shape")
    n, c, h, w = xs.shape
    k, _, kh, kw = wpos.shape
    length = cfg.stream_length
    il, wl = cfg.input_lfsr, cfg.weight_lfsr
    per_sample = c * h * w
    x_starts = stream_starts(cfg, layer_id, INPUT_ROLE, per_sample).reshape(c, h, w)
    x_words = encode_words(xs, x_starts[None], length, il.width, il.taps)
    w_starts = stream_starts(cfg, layer_id, WEIGHT_ROLE, wpos.size).reshape(wpos.shape)
    wp_words = encode_words(wpos, w_starts, length, wl.width, wl.taps).reshape(k, -1)
    wn_words = encode_words(wneg, w_starts, length, wl.width, wl.taps).reshape(k, -1)
    cols, (ho, wo) = im2col(x_words, kh, kw, stride, pad)
    counts = _or_count(cols.reshape(n * ho * wo, -1), np.concatenate([wp_words, wn_words]))
    counters.bump("sc_kernel_calls")
    counts = counts.reshape(n, ho, wo, 2, k).transpose(3, 0, 4, 1, 2)
    return counts[0], counts[1]


def _check_scaled(name: str, arr: np.ndarray) -> None:
    if arr.size and (arr.min() < 0 or arr.max() > 1 + 1e-6):
        raise ValueError(f"{name} must lie in [0, 1] after scaling, got range [{arr.min()}, {arr.max()}]")


def sc_conv2d(x, w, bias=None, cfg: ScConfig | None = None, stride: int = 1, pad: int = 0,
              layer_id: int = 0, in_scale: float | None = None, weight_scale: float | None = None) -> np.ndarray:
    """Split-unipolar SC convolution.

    ``x / in_scale`` and ``|w| / weight_scale`` must lie in [0, 1]; the output is
    ``in_scale * weight_scale * (decode(OR_pos) - decode(OR_neg)) + bias``.
    Both scales default to ``cfg.value_scale``.
    """
    cfg = cfg or ScConfig()
    in_scale = cfg.value_scale if in_scale is None else in_scale
    weight_scale = cfg.value_scale if weight_scale is None else weight_scale
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    if x.size and x.min() < 0:
        raise ValueError("SC inputs must be non-negative")
    xs = x / in_scale
    wpos = np.maximum(w, 0) / weight_scale
    wneg = np.maximum(-w, 0) / weight_scale
    _check_scaled("scaled input", xs)
    _check_scaled("scaled weight", np.maximum(wpos, wneg))
    pos, neg = sc_split_conv_counts(np.minimum(xs, 1), np.minimum(wpos, 1), np.minimum(wneg, 1),
                                    cfg, stride, pad, layer_id)
    y = (pos - neg) * (in_scale * weight_scale / cfg.stream_length)
    if bias is not None:
        y = y + np.asarray(bias, dtype=np.float64).reshape(1, -1, 1, 1)
    return y.astype(np.float32)


def sc_linear(x, w, bias=None, cfg: ScConfig | None = None, layer_id: int = 0,
              in_scale: float | None = None, weight_scale: float | None = None) -> np.ndarray:
    x = np.asarray(x)
    w = np.asarray(w)
    y = sc_conv2d(x[:, :, None, None], w[:, :, None, None], bias, cfg, 1, 0, layer_id, in_scale, weight_scale)
    return y[:, :, 0, 0]
