"""Differentiable ops for :class:`Tensor`."""

from __future__ import annotations

import numpy as np

from .. import counters
from . import functional as F
from .autograd import DTYPE, Function, Tensor, as_tensor


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Add(Function):
    def forward(self, a, b):
        self.shapes = (a.shape, b.shape)
        return a + b

    def backward(self, g):
        return _unbroadcast(g, self.shapes[0]), _unbroadcast(g, self.shapes[1])


class Sub(Function):
    def forward(self, a, b):
        self.shapes = (a.shape, b.shape)
        return a - b

    def backward(self, g):
        return _unbroadcast(g, self.shapes[0]), _unbroadcast(-g, self.shapes[1])


class Mul(Function):
    def forward(self, a, b):
        self.save_for_backward(a, b)
        return a * b

    def backward(self, g):
        a, b = self.saved
        return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)


class Scale(Function):
    """Multiply by a python scalar that is not part of the graph."""

    def forward(self, a, factor: float):
        self.factor = DTYPE(factor)
        return a * self.factor

    def backward(self, g):
        return g * self.factor


class Neg(Function):
    def forward(self, a):
        return -a

    def backward(self, g):
        return -g


class Sum(Function):
    def forward(self, a, axis=None):
        self.shape = a.shape
        self.axis = axis
        return np.sum(a, axis=axis)

    def backward(self, g):
        if self.axis is not None:
            g = np.expand_dims(g, self.axis)
        return np.broadcast_to(g, self.shape).copy()


class Mean(Function):
    def forward(self, a):
        self.shape = a.shape
        return np.mean(a, dtype=np.float64)

    def backward(self, g):
        return np.full(self.shape, g / np.prod(self.shape), dtype=DTYPE)


class Reshape(Function):
    def forward(self, a, shape):
        self.shape = a.shape
        return a.reshape(shape)

    def backward(self, g):
        return g.reshape(self.shape)


class Relu(Function):
    def forward(self, a):
        mask = a > 0
        self.save_for_backward(mask)
        return np.where(mask, a, 0)

    def backward(self, g):
        (mask,) = self.saved
        return g * mask


class MaxPool2x2(Function):
    def forward(self, a):
        n, c, h, w = a.shape
        self.in_shape = a.shape
        crop = a[:, :, : h - h % 2, : w - w % 2]
        blocks = crop.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
        blocks = blocks.reshape(n, c, h // 2, w // 2, 4)
        idx = blocks.argmax(axis=-1)
        self.save_for_backward(idx)
        return np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]

    def backward(self, g):
        (idx,) = self.saved
        n, c, h, w = self.in_shape
        blocks = np.zeros(idx.shape + (4,), dtype=DTYPE)
        np.put_along_axis(blocks, idx[..., None], g[..., None], axis=-1)
        blocks = blocks.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
        out = np.zeros(self.in_shape, dtype=DTYPE)
        out[:, :, : h - h % 2, : w - w % 2] = blocks.reshape(n, c, h - h % 2, w - w % 2)
        return out


class Conv2d(Function):
    def forward(self, x, w, stride=1, pad=0):
        F.check_conv_shapes(x, w, None, stride, pad)
        k, _, kh, kw = w.shape
        cols, (ho, wo) = F.im2col(x, kh, kw, stride, pad)
        self.geom = (x.shape, kh, kw, stride, pad)
        self.save_for_backward(cols, w)
        counters.bump("dense_flops", 2 * cols.shape[0] * cols.shape[1] * cols.shape[2] * k)
        y = cols @ w.reshape(k, -1).T
        return y.transpose(0, 2, 1).reshape(x.shape[0], k, ho, wo)

    def backward(self, g):
        cols, w = self.saved
        x_shape, kh, kw, stride, pad = self.geom
        n, k = g.shape[:2]
        gm = g.reshape(n, k, -1).transpose(0, 2, 1)  # [N,P,K]
        dw = (gm.reshape(-1, k).T @ cols.reshape(-1, cols.shape[-1])).reshape(w.shape)
        dcols = gm @ w.reshape(k, -1)
        dx = F.col2im(dcols, x_shape, kh, kw, stride, pad)
        counters.bump("dense_flops", 4 * cols.size * k)
        return dx, dw


class Linear(Function):
    def forward(self, x, w):
        if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[1]:
            raise ValueError(f"linear expects x[N,D] and w[M,D], got {x.shape} and {w.shape}")
        self.save_for_backward(x, w)
        counters.bump("dense_flops", 2 * x.shape[0] * x.shape[1] * w.shape[0])
        return x @ w.T

    def backward(self, g):
        x, w = self.saved
        counters.bump("dense_flops", 4 * x.shape[0] * x.shape[1] * w.shape[0])
        return g @ w, g.T @ x


class ChannelBias(Function):
    """Add ``b[K]`` along axis 1."""

    def forward(self, y, b):
        if b.shape != (y.shape[1],):
            raise ValueError(f"bias shape {b.shape} does not match {y.shape[1]} channels")
        self.ndim = y.ndim
        return y + b.reshape((1, -1) + (1,) * (y.ndim - 2))

    def backward(self, g):
        axes = (0,) + tuple(range(2, self.ndim))
        return g, g.sum(axis=axes)


class ConvGroupSums(Function):
    """Per-input-channel partial sums of a convolution: ``[N, K, C, Ho, Wo]``.

    Summing over axis 2 gives the ordinary convolution.
    """

    def forward(self, x, w, stride=1, pad=0):
        F.check_conv_shapes(x, w, None, stride, pad)
        n = x.shape[0]
        k, c, kh, kw = w.shape
        cols, (ho, wo) = F.im2col(x, kh, kw, stride, pad)
        p = cols.shape[1]
        cols_c = np.ascontiguousarray(cols.reshape(n * p, c, kh * kw).transpose(1, 0, 2))
        w_c = w.reshape(k, c, kh * kw).transpose(1, 2, 0)  # [C, kk, K]
        self.geom = (x.shape, w.shape, stride, pad, ho, wo)
        self.save_for_backward(cols_c, w_c)
        counters.bump("dense_flops", 2 * n * p * c * kh * kw * k)
        out = cols_c @ w_c  # [C, N*P, K]
        return out.reshape(c, n, ho, wo, k).transpose(1, 4, 0, 2, 3)

    def backward(self, g):
        cols_c, w_c = self.saved
        x_shape, w_shape, stride, pad, ho, wo = self.geom
        n, k, c = g.shape[:3]
        kh, kw = w_shape[2:]
        g_c = g.transpose(2, 0, 3, 4, 1).reshape(c, -1, k)  # [C, N*P, K]
        dw_c = cols_c.transpose(0, 2, 1) @ g_c  # [C, kk, K]
        dw = dw_c.transpose(2, 0, 1).reshape(w_shape)
        dcols_c = g_c @ w_c.transpose(0, 2, 1)  # [C, N*P, kk]
        dcols = dcols_c.transpose(1, 0, 2).reshape(n, ho * wo, c * kh * kw)
        dx = F.col2im(dcols, x_shape, kh, kw, stride, pad)
        return dx, dw


class LinearGroupSums(Function):
    """Partial sums of ``x @ w.T`` over consecutive groups of ``group_size`` inputs: ``[N, M, G]``."""

    def forward(self, x, w, group_size=9):
        n, d = x.shape
        m = w.shape[0]
        groups = -(-d // group_size)
        padded = groups * group_size
        xg = np.zeros((n, padded), dtype=DTYPE)
        xg[:, :d] = x
        wg = np.zeros((m, padded), dtype=DTYPE)
        wg[:, :d] = w
        x_g = np.ascontiguousarray(xg.reshape(n, groups, group_size).transpose(1, 0, 2))
        w_g = wg.reshape(m, groups, group_size).transpose(1, 2, 0)  # [G, gs, M]
        self.geom = (d, group_size)
        self.save_for_backward(x_g, w_g)
        counters.bump("dense_flops", 2 * n * padded * m)
        return (x_g @ w_g).transpose(1, 2, 0)

    def backward(self, g):
        x_g, w_g = self.saved
        d, gs = self.geom
        g_g = g.transpose(2, 0, 1)  # [G, N, M]
        dx = (g_g @ w_g.transpose(0, 2, 1)).transpose(1, 0, 2).reshape(g.shape[0], -1)[:, :d]
        dw = (x_g.transpose(0, 2, 1) @ g_g).transpose(2, 0, 1).reshape(g.shape[1], -1)[:, :d]
        return dx, dw


class SoftmaxCrossEntropy(Function):
    def forward(self, logits, labels=None):
        labels = np.asarray(labels)
        n, classes = logits.shape
        if labels.shape != (n,):
            raise ValueError(f"labels shape {labels.shape} does not match batch {n}")
        if labels.size and (labels.min() < 0 or labels.max() >= classes):
            raise ValueError(f"label out of range [0, {classes}): min {labels.min()}, max {labels.max()}")
        logp = F.log_softmax(logits.astype(np.float64))
        self.save_for_backward(logp, labels)
        return -logp[np.arange(n), labels].mean()

    def backward(self, g):
        logp, labels = self.saved
        n = logp.shape[0]
        grad = np.exp(logp)
        grad[np.arange(n), labels] -= 1.0
        return (grad * (g / n)).astype(DTYPE)


class StraightThrough(Function):
    """Forward emits ``value``; backward passes the gradient to ``a`` unchanged."""

    def forward(self, a, value=None):
        value = np.asarray(value, dtype=DTYPE)
        if value.shape != a.shape:
            raise ValueError(f"replacement value {value.shape} does not match {a.shape}")
        return value

    def backward(self, g):
        return g


def add(a, b) -> Tensor:
    return Add.apply(a, b)


def sub(a, b) -> Tensor:
    return Sub.apply(a, b)


def mul(a, b) -> Tensor:
    if isinstance(b, (int, float)) and not isinstance(a, (int, float)):
        return Scale.apply(a, factor=b)
    if isinstance(a, (int, float)):
        return Scale.apply(b, factor=a)
    return Mul.apply(a, b)


def neg(a) -> Tensor:
    return Neg.apply(a)


def sum(a, axis=None) -> Tensor:  # noqa: A001
    return Sum.apply(a, axis=axis)


def mean(a) -> Tensor:
    return Mean.apply(a)


def reshape(a, shape) -> Tensor:
    return Reshape.apply(a, shape=tuple(shape))


def flatten(a) -> Tensor:
    a = as_tensor(a)
    return reshape(a, (a.shape[0], -1))


def relu(a) -> Tensor:
    return Relu.apply(a)


def maxpool2x2(a) -> Tensor:
    return MaxPool2x2.apply(a)


def conv2d(x, w, bias=None, stride: int = 1, pad: int = 0) -> Tensor:
    y = Conv2d.apply(x, w, stride=stride, pad=pad)
    return y if bias is None else ChannelBias.apply(y, bias)


def linear(x, w, bias=None) -> Tensor:
    y = Linear.apply(x, w)
    return y if bias is None else ChannelBias.apply(y, bias)


def conv_group_sums(x, w, stride: int = 1, pad: int = 0) -> Tensor:
    return ConvGroupSums.apply(x, w, stride=stride, pad=pad)


def linear_group_sums(x, w, group_size: int) -> Tensor:
    return LinearGroupSums.apply(x, w, group_size=group_size)


def softmax_cross_entropy(logits, labels) -> Tensor:
    return SoftmaxCrossEntropy.apply(logits, labels=labels)


def straight_through(a, value) -> Tensor:
    return StraightThrough.apply(a, value=value)
