"""Analog in-memory accelerator model with low-bit ADCs on partial sums.

Weights are split into positive and negative arrays. Each array computes
partial sums over a group of products (one input channel's kernel window for
convolutions), a uniform ADC clamps and digitises every partial sum, and the
resulting codes are accumulated in the digital domain.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import counters
from .mult import quantize8
from .tensor.functional import check_conv_shapes, im2col

DEFAULT_PERCENTILE = 99.9
CLIP_FLOOR = 1e-6


@dataclass(frozen=True)
class AdcConfig:
    bits: int = 4
    clip: float = 1.0
    group_size: int = 9  # used by linear layers; conv groups are one channel's window
    clip_neg: float | None = None

    def __post_init__(self):
        if not 2 <= self.bits <= 8:
            raise ValueError(f"ADC bits must be in [2, 8], got {self.bits}")
        for c in (self.clip, self.clip_neg):
            if c is not None and not (np.isfinite(c) and c > 0):
                raise ValueError(f"ADC clip must be finite and positive, got {c}")
        if self.group_size < 1:
            raise ValueError(f"group_size must be >= 1, got {self.group_size}")

    @property
    def levels(self) -> int:
        return (1 << self.bits) - 1

    @property
    def clips(self) -> tuple[float, float]:
        return self.clip, self.clip if self.clip_neg is None else self.clip_neg


def adc_codes(v, bits: int, clip: float) -> np.ndarray:
    """Integer ADC output for non-negative analog values."""
    v = np.asarray(v, dtype=np.float64)
    if v.size and v.min() < 0:
        raise ValueError("ADC input must be non-negative (unipolar)")
    levels = (1 << bits) - 1
    return np.floor(np.minimum(v, clip) * levels / clip + 0.5).astype(np.int64)


def adc_quantize(v, cfg: AdcConfig):
    """Clamp at ``cfg.clip`` and round to one of ``2**bits`` uniform levels."""
    codes = adc_codes(v, cfg.bits, cfg.clip)
    out = codes * (cfg.clip / cfg.levels)
    return float(out) if np.ndim(v) == 0 else out


def calibrate_clip(sums, percentile: float = DEFAULT_PERCENTILE) -> float:
    """Full-scale level from observed (unquantized) partial sums of one polarity."""
    sums = np.asarray(sums, dtype=np.float64)
    if not sums.size:
        return CLIP_FLOOR
    return max(float(np.percentile(sums, percentile)), CLIP_FLOOR)


@dataclass(frozen=True)
class GroupSums:
    """Integer partial sums per polarity plus the float scale that dequantizes them."""

    pos: np.ndarray  # [N, K, G, *spatial]
    neg: np.ndarray
    scale: float

    def real(self) -> tuple[np.ndarray, np.ndarray]:
        return self.pos * self.scale, self.neg * self.scale


def _split_int(wq: np.ndarray):
    w = wq.astype(np.float64)
    return np.maximum(w, 0), np.maximum(-w, 0)


def conv_group_sums(x, w, stride: int = 1, pad: int = 0) -> GroupSums:
    x = np.asarray(x, dtype=np.float32)
    w = np.asarray(w, dtype=np.float32)
    check_conv_shapes(x, w, None, stride, pad)
    if x.size and x.min() < 0:
        raise ValueError("analog inputs must be non-negative")
    xq, xp = quantize8(x)
    wq, wp = quantize8(w)
    n = x.shape[0]
    k, c, kh, kw = w.shape
    cols, (ho, wo) = im2col(xq.astype(np.float64), kh, kw, stride, pad)
    cols_c = cols.reshape(n * ho * wo, c, kh * kw).transpose(1, 0, 2)  # [C, NP, kk]
    wpos, wneg = _split_int(wq)
    both = np.concatenate([wpos, wneg]).reshape(2 * k, c, kh * kw).transpose(1, 2, 0)  # [C, kk, 2K]
    sums = cols_c @ both  # [C, NP, 2K], exact integers in float64
    counters.bump("analog_group_ops", sums.size * kh * kw)
    sums = sums.reshape(c, n, ho, wo, 2, k).transpose(4, 1, 5, 0, 2, 3)
    return GroupSums(sums[0], sums[1], xp.scale * wp.scale)


def linear_group_sums(x, w, group_size: int) -> GroupSums:
    x = np.asarray(x, dtype=np.float32)
    w = np.asarray(w, dtype=np.float32)
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[1]:
        raise ValueError(f"linear expects x[N,D] and w[M,D], got {x.shape} and {w.shape}")
    if x.size and x.min() < 0:
        raise ValueError("analog inputs must be non-negative")
    xq, xp = quantize8(x)
    wq, wp = quantize8(w)
    n, d = x.shape
    m = w.shape[0]
    groups = -(-d // group_size)
    padded = groups * group_size
    xg = np.zeros((n, padded))
    xg[:, :d] = xq
    wpos, wneg = _split_int(wq)
    wg = np.zeros((2 * m, padded))
    wg[:m, :d] = wpos
    wg[m:, :d] = wneg
    x_g = xg.reshape(n, groups, group_size).transpose(1, 0, 2)  # [G, N, gs]
    w_g = wg.reshape(2 * m, groups, group_size).transpose(1, 2, 0)  # [G, gs, 2M]
    sums = (x_g @ w_g).reshape(groups, n, 2, m).transpose(2, 1, 3, 0)  # [2, N, M, G]
    counters.bump("analog_group_ops", sums.size * group_size)
    return GroupSums(sums[0], sums[1], xp.scale * wp.scale)


def calibrate_group_clips(gs: GroupSums, percentile: float = DEFAULT_PERCENTILE) -> tuple[float, float]:
    pos, neg = gs.real()
    return calibrate_clip(pos, percentile), calibrate_clip(neg, percentile)


def accumulate_adc(gs: GroupSums, cfg: AdcConfig, bias=None) -> np.ndarray:
    """Digitise each partial sum and accumulate the codes; returns float32 output."""
    clip_pos, clip_neg = cfg.clips
    pos, neg = gs.real()
    code_pos = adc_codes(pos, cfg.bits, clip_pos).sum(axis=2)
    code_neg = adc_codes(neg, cfg.bits, clip_neg).sum(axis=2)
    y = code_pos * (clip_pos / cfg.levels) - code_neg * (clip_neg / cfg.levels)
    if bias is not None:
        b = np.asarray(bias, dtype=np.float64)
        y = y + b.reshape((1, -1) + (1,) * (y.ndim - 2))
    counters.bump("analog_kernel_calls")
    return y.astype(np.float32)


def analog_conv2d(x, w, bias=None, cfg: AdcConfig | None = None, stride: int = 1, pad: int = 0) -> np.ndarray:
    cfg = cfg or AdcConfig()
    return accumulate_adc(conv_group_sums(x, w, stride, pad), cfg, bias)


def analog_linear(x, w, bias=None, cfg: AdcConfig | None = None) -> np.ndarray:
    cfg = cfg or AdcConfig()
    return accumulate_adc(linear_group_sums(x, w, cfg.group_size), cfg, bias)
