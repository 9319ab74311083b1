"""Backward-pass proxy activations for split-unipolar layers.

Stochastic OR accumulation saturates like ``1 - exp(-x)`` and an analog array
saturates at its ADC full scale. Both nonlinearities act on the positive and
negative halves separately, so the proxies take the two halves of a layer's
pre-activation output. They exist to shape gradients during training; the
inference path never calls them.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import counters
from .checkpointing import PointwiseFn
from .tensor.functional import conv2d_exact, linear_exact


@dataclass
class SplitOutput:
    x_pos: np.ndarray
    x_neg: np.ndarray

    def __post_init__(self):
        self.x_pos = np.asarray(self.x_pos, dtype=np.float32)
        self.x_neg = np.asarray(self.x_neg, dtype=np.float32)
        if self.x_pos.shape != self.x_neg.shape:
            raise ValueError(f"split halves differ in shape: {self.x_pos.shape} vs {self.x_neg.shape}")


def split_forward(x, w, bias=None, kind: str = "conv", stride: int = 1, pad: int = 0) -> SplitOutput:
    """Outputs of the positive and negative weight halves (bias kept out of both)."""
    x = np.asarray(x, dtype=np.float32)
    w = np.asarray(w, dtype=np.float32)
    if x.size and x.min() < 0:
        raise ValueError("split-unipolar layers need non-negative inputs")
    wpos, wneg = np.maximum(w, 0), np.maximum(-w, 0)
    if kind == "conv":
        return SplitOutput(conv2d_exact(x, wpos, None, stride, pad), conv2d_exact(x, wneg, None, stride, pad))
    if kind == "linear":
        return SplitOutput(linear_exact(x, wpos), linear_exact(x, wneg))
    raise ValueError(f"unknown layer kind {kind!r}")


def _halves(s, x_neg):
    if isinstance(s, SplitOutput):
        return s.x_pos, s.x_neg
    return np.asarray(s, dtype=np.float32), np.asarray(x_neg, dtype=np.float32)


def _check_nonneg(*arrays):
    for a in arrays:
        if a.size and a.min() < 0:
            raise ValueError("proxy activations take non-negative split outputs")


def sc_act(s, x_neg=None) -> np.ndarray:
    """``(1 - exp(-x_pos)) - (1 - exp(-x_neg))``."""
    xp, xn = _halves(s, x_neg)
    _check_nonneg(xp, xn)
    counters.bump("proxy_calls")
    return np.exp(-xn) - np.exp(-xp)


def sc_act_grad(s, x_neg=None) -> tuple[np.ndarray, np.ndarray]:
    xp, xn = _halves(s, x_neg)
    return np.exp(-xp), -np.exp(-xn)


def _clips(clip) -> tuple[float, float]:
    if np.ndim(clip) == 0:
        return float(clip), float(clip)
    cp, cn = clip
    return float(cp), float(cn)


def analog_act(s, clip=1.0, x_neg=None) -> np.ndarray:
    """``min(x_pos, clip) - min(x_neg, clip)``; ``clip`` may be a (pos, neg) pair."""
    xp, xn = _halves(s, x_neg)
    _check_nonneg(xp, xn)
    cp, cn = _clips(clip)
    counters.bump("proxy_calls")
    return np.minimum(xp, cp) - np.minimum(xn, cn)


def analog_act_grad(s, clip=1.0, x_neg=None) -> tuple[np.ndarray, np.ndarray]:
    # gradient 0 on the boundary x == clip
    xp, xn = _halves(s, x_neg)
    cp, cn = _clips(clip)
    return (xp < cp).astype(np.float32), -(xn < cn).astype(np.float32)


class ScAct(PointwiseFn):
    n_inputs = 2
    flops_per_element = 6
    name = "sc_act"

    def forward(self, xp, xn):
        _check_nonneg(xp, xn)
        counters.bump("proxy_calls")
        ep, en = np.exp(-xp), np.exp(-xn)
        return en - ep, (ep, en)

    def backward(self, residuals, g):
        ep, en = residuals
        return g * ep, -g * en


class AnalogAct(PointwiseFn):
    n_inputs = 2
    flops_per_element = 3
    name = "analog_act"

    def __init__(self, clip=1.0):
        self.clip = _clips(clip)

    def forward(self, xp, xn):
        _check_nonneg(xp, xn)
        counters.bump("proxy_calls")
        cp, cn = self.clip
        mp, mn = xp < cp, xn < cn
        return np.where(mp, xp, cp) - np.where(mn, xn, cn), (mp, mn)

    def backward(self, residuals, g):
        mp, mn = residuals
        return g * mp, -g * mn


class Difference(PointwiseFn):
    """``x_pos - x_neg``: the no-proxy stand-in with the same wiring."""

    n_inputs = 2
    name = "difference"

    def forward(self, xp, xn):
        return xp - xn, ()

    def backward(self, residuals, g):
        return g, -g
