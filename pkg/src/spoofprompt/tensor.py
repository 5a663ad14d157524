"""Reverse-mode autodiff over 64-bit numpy arrays.

The tape is built eagerly: every operation returns a new :class:`Tensor`
holding its forward value plus a closure that routes gradients to its
parents.  Values are always float64 in row-major order, and every operation
checks its output for NaN/Inf — a non-finite intermediate raises
:class:`~spoofprompt.errors.NonFiniteError` naming the operation, which is
what lets the trainer report the first bad node instead of a mystery NaN
loss many steps later.

Gradient recording can be suspended with :func:`no_grad` for probe/eval
forward passes.
"""

from __future__ import annotations

import hashlib

import numpy as np

from .errors import AutodiffError, DimensionError, NonFiniteError

__all__ = [
    "Tensor",
    "Rng",
    "no_grad",
    "is_grad_enabled",
    "as_tensor",
    "add",
    "sub",
    "mul",
    "neg",
    "matmul",
    "reshape",
    "transpose",
    "concat",
    "take_range",
    "broadcast_to",
    "tsum",
    "tmean",
    "log",
    "exp",
    "embedding_lookup",
]

_GRAD_ENABLED = True


class no_grad:
    """Context manager that disables tape recording."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


def _check_finite(arr: np.ndarray, op_name: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(op_name)


class Tensor:
    """Dense float64 array with optional gradient tracking.

    ``data`` is always a C-contiguous float64 ndarray.  ``grad`` is filled
    in by :meth:`backward` for every tensor on the tape that
    ``requires_grad``; leaves keep it until explicitly cleared.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward_fn", "op_name")

    def __init__(self, data, requires_grad: bool = False, *, _parents=(), _backward=None, _op="leaf"):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim and not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)  # keep 0-d scalars 0-d
        _check_finite(arr, _op)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = _parents
        self._backward_fn = _backward
        self.op_name = _op

    # -- basic introspection -------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise AutodiffError(f"item() on tensor of shape {self.data.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, op={self.op_name}, requires_grad={self.requires_grad})"

    # -- operator sugar --------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    # -- backward pass ---------------------------------------------------------

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Run reverse-mode accumulation from this tensor.

        Without an explicit seed gradient the tensor must be scalar.
        Gradients accumulate (+=) into ``.grad`` of every reachable tensor
        with ``requires_grad``, so callers zero grads between steps.
        """
        if grad is None:
            if self.data.size != 1:
                raise AutodiffError("backward() without a seed gradient requires a scalar tensor")
            grad = np.ones_like(self.data)
        else:
            grad = np.ascontiguousarray(grad, dtype=np.float64)
            if grad.shape != self.data.shape:
                raise DimensionError(f"seed gradient shape {grad.shape} != tensor shape {self.data.shape}")

        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen and p.requires_grad:
                    stack.append((p, False))

        self.grad = grad if self.grad is None else self.grad + grad
        for node in reversed(topo):
            if node._backward_fn is not None and node.grad is not None:
                node._backward_fn(node.grad)

    def zero_grad(self) -> None:
        self.grad = None


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if t.requires_grad:
        t.grad = g if t.grad is None else t.grad + g


def _node(data: np.ndarray, parents: tuple[Tensor, ...], backward, op: str) -> Tensor:
    requires = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    if requires:
        return Tensor(data, True, _parents=parents, _backward=backward, _op=op)
    return Tensor(data, _op=op)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# -- elementwise arithmetic ------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data

    def bw(g):
        _accumulate(a, _unbroadcast(g, a.data.shape))
        _accumulate(b, _unbroadcast(g, b.data.shape))

    return _node(out, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data - b.data

    def bw(g):
        _accumulate(a, _unbroadcast(g, a.data.shape))
        _accumulate(b, _unbroadcast(-g, b.data.shape))

    return _node(out, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data

    def bw(g):
        _accumulate(a, _unbroadcast(g * b.data, a.data.shape))
        _accumulate(b, _unbroadcast(g * a.data, b.data.shape))

    return _node(out, (a, b), bw, "mul")


def neg(a) -> Tensor:
    a = as_tensor(a)

    def bw(g):
        _accumulate(a, -g)

    return _node(-a.data, (a,), bw, "neg")


def log(a) -> Tensor:
    a = as_tensor(a)
    out = np.log(a.data)

    def bw(g):
        _accumulate(a, g / a.data)

    return _node(out, (a,), bw, "log")


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)

    def bw(g):
        _accumulate(a, g * out)

    return _node(out, (a,), bw, "exp")


# -- shape manipulation ------------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim < 1 or b.data.ndim < 2:
        raise DimensionError(f"matmul needs matrix operands, got {a.data.shape} @ {b.data.shape}")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise DimensionError(f"matmul inner dims disagree: {a.data.shape} @ {b.data.shape}")
    out = a.data @ b.data

    def bw(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        _accumulate(a, _unbroadcast(ga, a.data.shape))
        _accumulate(b, _unbroadcast(gb, b.data.shape))

    return _node(out, (a, b), bw, "matmul")


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    out = np.reshape(a.data, shape)

    def bw(g):
        _accumulate(a, np.reshape(g, a.data.shape))

    return _node(out, (a,), bw, "reshape")


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.data.ndim)))
    out = np.transpose(a.data, axes)
    inverse = tuple(np.argsort(axes))

    def bw(g):
        _accumulate(a, np.transpose(g, inverse))

    return _node(out, (a,), bw, "transpose")


def concat(parts, axis: int) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    if not parts:
        raise DimensionError("concat of zero tensors")
    out = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def bw(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            _accumulate(p, g[tuple(idx)])

    return _node(out, tuple(parts), bw, "concat")


def take_range(a, axis: int, start: int, stop: int) -> Tensor:
    """Contiguous slice along one axis; gradient is zero outside the slice."""
    a = as_tensor(a)
    axis = axis % a.data.ndim
    idx = [slice(None)] * a.data.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)
    out = np.ascontiguousarray(a.data[idx])

    def bw(g):
        full = np.zeros_like(a.data)
        full[idx] = g
        _accumulate(a, full)

    return _node(out, (a,), bw, "take_range")


def broadcast_to(a, shape) -> Tensor:
    a = as_tensor(a)
    out = np.ascontiguousarray(np.broadcast_to(a.data, shape))

    def bw(g):
        _accumulate(a, _unbroadcast(g, a.data.shape))

    return _node(out, (a,), bw, "broadcast_to")


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = np.sum(a.data, axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is None:
            _accumulate(a, np.broadcast_to(g, a.data.shape).copy())
            return
        gg = g
        if not keepdims:
            gg = np.expand_dims(g, axis)
        _accumulate(a, np.broadcast_to(gg, a.data.shape).copy())

    return _node(np.asarray(out), (a,), bw, "sum")


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        count = a.data.size
    else:
        count = a.data.shape[axis]
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def embedding_lookup(table, ids) -> Tensor:
    """Row gather: out[i] = table[ids[i]]; gradient scatter-adds."""
    table = as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    if table.data.ndim != 2:
        raise DimensionError(f"embedding table must be 2-D, got {table.data.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.data.shape[0]):
        raise DimensionError("embedding id out of range")
    out = table.data[ids]

    def bw(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids, g)
        _accumulate(table, full)

    return _node(out, (table,), bw, "embedding_lookup")


# -- deterministic randomness ---------------------------------------------------------


class Rng:
    """Seeded random stream backed by numpy's PCG64 generator.

    A given seed reproduces the identical value stream across runs and
    platforms.  Child streams are derived by hashing the parent seed with a
    string tag, so independent concerns (init, shuffle, augmentation, ...)
    never share draws.
    """

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    def child(self, tag: str) -> "Rng":
        digest = hashlib.sha256(f"{self.seed}/{tag}".encode()).digest()
        return Rng(int.from_bytes(digest[:8], "little"))

    def normal(self, shape, std: float = 1.0) -> np.ndarray:
        return self._gen.standard_normal(shape) * std

    def truncated_normal(self, shape, std: float = 0.02, bound: float = 2.0) -> np.ndarray:
        """Normal draw with rejection outside ±bound sigma, then scaled by std."""
        out = self._gen.standard_normal(shape)
        bad = np.abs(out) > bound
        while bad.any():
            out[bad] = self._gen.standard_normal(int(bad.sum()))
            bad = np.abs(out) > bound
        return out * std

    def uniform(self, low: float, high: float, shape=None):
        return self._gen.uniform(low, high, shape)

    def integers(self, low: int, high: int | None = None, shape=None):
        return self._gen.integers(low, high, size=shape)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)
