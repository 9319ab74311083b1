"""Pointwise functions and recompute-in-backward checkpointing.

A :class:`PointwiseFn` maps one or more same-shaped arrays to one array and
knows its own vector-Jacobian product. Applied normally, the residuals it
needs for backward are kept in the graph. Applied through
:func:`checkpointed_apply`, only the inputs are kept and the function is
re-run during backward, as far as its local gradient needs. Stochastic
functions must carry a noise key so any re-run draws the same noise.
"""

from __future__ import annotations

import numpy as np

from . import counters
from .tensor.autograd import Function, Tensor


class PointwiseFn:
    n_inputs = 1
    stochastic = False
    flops_per_element = 1
    name = "pointwise"
    key = None

    def forward(self, *xs: np.ndarray) -> tuple[np.ndarray, tuple]:
        """Return ``(output, residuals)``."""
        raise NotImplementedError

    def backward(self, residuals: tuple, g: np.ndarray) -> tuple:
        raise NotImplementedError

    def residuals(self, *xs: np.ndarray) -> tuple:
        """What :meth:`backward` needs; overridden when that is cheaper than a full forward."""
        return self.forward(*xs)[1]

    def __call__(self, *xs):
        return self.forward(*(np.asarray(x, dtype=np.float32) for x in xs))[0]


class Chain(PointwiseFn):
    """``fns[-1](...fns[1](fns[0](*xs)))``; only the first member may take several inputs."""

    def __init__(self, *fns: PointwiseFn):
        if not fns:
            raise ValueError("empty chain")
        if any(f.n_inputs != 1 for f in fns[1:]):
            raise ValueError("only the first function in a chain may take several inputs")
        self.fns = fns
        self.n_inputs = fns[0].n_inputs
        self.stochastic = any(f.stochastic for f in fns)
        self.flops_per_element = sum(f.flops_per_element for f in fns)
        self.name = "+".join(f.name for f in fns)

    @property
    def key(self):
        keys = [f.key for f in self.fns if f.stochastic]
        return keys[0] if keys and all(k is not None for k in keys) else None

    def forward(self, *xs):
        residuals = []
        out = xs
        for f in self.fns:
            y, r = f.forward(*out)
            residuals.append(r)
            out = (y,)
        return out[0], tuple(residuals)

    def residuals(self, *xs):
        # the last member's output is never consumed, so only its residuals are rebuilt
        out = xs
        res = []
        for f in self.fns[:-1]:
            y, r = f.forward(*out)
            res.append(r)
            out = (y,)
        res.append(self.fns[-1].residuals(*out))
        return tuple(res)

    def backward(self, residuals, g):
        grads = (g,)
        for f, r in zip(reversed(self.fns), reversed(residuals)):
            grads = f.backward(r, grads[0])
        return grads


def _check_registration(fn: PointwiseFn) -> None:
    if fn.stochastic and fn.key is None:
        raise ValueError(f"stochastic pointwise function {fn.name!r} needs a noise key")


def _flatten(residuals) -> list:
    out = []
    for r in residuals:
        if isinstance(r, tuple):
            out.extend(_flatten(r))
        else:
            out.append(r)
    return out


class _PointwiseOp(Function):
    def forward(self, *xs, fn=None):
        self.fn = fn
        out, residuals = fn.forward(*xs)
        self.residuals = residuals if self.needs_grad else ()
        self.save_for_backward(*_flatten(residuals))
        counters.bump("pointwise_flops", fn.flops_per_element * out.size)
        return out

    def backward(self, g):
        return self.fn.backward(self.residuals, g)


class _CheckpointOp(Function):
    def forward(self, *xs, fn=None):
        self.fn = fn
        out, _ = fn.forward(*xs)
        self.save_for_backward(*xs)
        counters.bump("pointwise_flops", fn.flops_per_element * out.size)
        return out

    def backward(self, g):
        residuals = self.fn.residuals(*self.saved)
        counters.bump("recompute_calls")
        return self.fn.backward(residuals, g)


def apply_pointwise(fn: PointwiseFn, *inputs: Tensor) -> Tensor:
    _check_registration(fn)
    return _PointwiseOp.apply(*inputs, fn=fn)


def checkpointed_apply(fn: PointwiseFn, *inputs: Tensor) -> Tensor:
    """Apply ``fn`` storing only its inputs; backward re-runs ``fn`` to get its local gradient."""
    _check_registration(fn)
    return _CheckpointOp.apply(*inputs, fn=fn)


def apply(fn: PointwiseFn, *inputs: Tensor, checkpoint: bool = True) -> Tensor:
    return checkpointed_apply(fn, *inputs) if checkpoint else apply_pointwise(fn, *inputs)
