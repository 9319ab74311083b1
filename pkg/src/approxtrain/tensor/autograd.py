"""A small reverse-mode autograd engine over numpy float32 arrays."""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np

DTYPE = np.float32

_grad_enabled = True
_trackers: list["SavedTracker"] = []


class NonFiniteError(FloatingPointError):
    """An operation produced NaN or Inf."""


@contextmanager
def no_grad():
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled() -> bool:
    return _grad_enabled


class SavedTracker:
    """Accumulates the distinct arrays that ops keep alive for the backward pass."""

    def __init__(self):
        self._arrays: dict[int, np.ndarray] = {}

    def add(self, arr: np.ndarray) -> None:
        # holding the reference keeps id() unique for the tracker's lifetime
        self._arrays.setdefault(id(arr), arr)

    @property
    def nbytes(self) -> int:
        return sum(a.nbytes for a in self._arrays.values())

    def __len__(self):
        return len(self._arrays)


@contextmanager
def track_saved():
    tracker = SavedTracker()
    _trackers.append(tracker)
    try:
        yield tracker
    finally:
        _trackers.remove(tracker)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_ctx", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._ctx: Function | None = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    # arithmetic sugar; the Function classes live in ops.py
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from . import ops
        return ops.neg(self)

    def sum(self, axis=None):
        from . import ops
        return ops.sum(self, axis)

    def mean(self):
        from . import ops
        return ops.mean(self)

    def reshape(self, *shape):
        from . import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def relu(self):
        from . import ops
        return ops.relu(self)

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into ``.grad`` of every leaf that requires grad."""
        if self.data.size != 1:
            raise ValueError(f"backward() needs a scalar loss, got shape {self.shape}")
        order = _topological(self)
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            ctx = node._ctx
            if ctx is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            parent_grads = ctx.backward(g)
            if not isinstance(parent_grads, tuple):
                parent_grads = (parent_grads,)
            for parent, pg in zip(ctx.parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                pg = np.asarray(pg, dtype=DTYPE)
                if pg.shape != parent.shape:
                    raise RuntimeError(
                        f"{type(ctx).__name__} returned grad {pg.shape} for input {parent.shape}"
                    )
                key = id(parent)
                grads[key] = grads[key] + pg if key in grads else pg


def _topological(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        if node._ctx is not None:
            for p in node._ctx.parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Function:
    """Base class for differentiable ops.

    Subclasses implement ``forward(*arrays, **kw) -> array`` and
    ``backward(grad) -> grad or tuple of grads`` (one per tensor input, ``None``
    allowed). Anything needed later goes through :meth:`save_for_backward`
    so memory trackers see it.
    """

    needs_grad = False

    def __init__(self):
        self.parents: tuple[Tensor, ...] = ()
        self.saved: tuple = ()

    def save_for_backward(self, *arrays) -> None:
        if not self.needs_grad:
            return
        self.saved = arrays
        for tracker in _trackers:
            for a in arrays:
                if isinstance(a, np.ndarray):
                    tracker.add(a)

    def forward(self, *arrays, **kwargs):
        raise NotImplementedError

    def backward(self, grad):
        raise NotImplementedError

    @classmethod
    def apply(cls, *inputs, **kwargs) -> Tensor:
        fn = cls()
        tensors = tuple(as_tensor(x) for x in inputs)
        fn.needs_grad = _grad_enabled and any(t.requires_grad for t in tensors)
        out = np.asarray(fn.forward(*(t.data for t in tensors), **kwargs), dtype=DTYPE)
        if not np.isfinite(out).all():
            raise NonFiniteError(f"{cls.__name__} produced a non-finite value")
        result = Tensor(out, requires_grad=fn.needs_grad)
        if fn.needs_grad:
            fn.parents = tensors
            result._ctx = fn
        return result
