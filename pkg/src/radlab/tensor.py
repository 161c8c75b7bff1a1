"""Dense tensors with define-by-run reverse-mode differentiation.

Every op is a plain function over :class:`Tensor` values. When a :class:`Tape`
is active (``with Tape() as tape:``) and any input requires a gradient, the op
appends a record holding its inputs, output and a backward closure. Calling
:func:`backward` walks the records in reverse and returns gradients for every
leaf tensor that requires them.

Storage is 32-bit by default. Reductions (dot products, softmax sums, norms)
accumulate in 64-bit and cast back. :func:`precision` switches the storage dtype
for a block, which is what the finite-difference checks use.
"""

from __future__ import annotations

import contextlib
import math
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np

_local = threading.local()
_F64 = np.float64


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested op."""


class ContractError(ValueError):
    """An op was called outside its documented preconditions."""


def get_dtype() -> np.dtype:
    return getattr(_local, "dtype", np.dtype(np.float32))


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    """Temporarily change the storage dtype of newly created tensors."""
    prev = get_dtype()
    _local.dtype = np.dtype(dtype)
    try:
        yield
    finally:
        _local.dtype = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "__weakref__")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=get_dtype())
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = requires_grad

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool = False) -> "Tensor":
        t = cls.__new__(cls)
        arr = arr.astype(get_dtype(), copy=False)
        arr.flags.writeable = False
        t.data = arr
        t.requires_grad = requires_grad
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __mul__(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def zeros(shape: Sequence[int], requires_grad: bool = False) -> Tensor:
    return Tensor._wrap(np.zeros(tuple(shape), dtype=get_dtype()), requires_grad)


def ones(shape: Sequence[int], requires_grad: bool = False) -> Tensor:
    return Tensor._wrap(np.ones(tuple(shape), dtype=get_dtype()), requires_grad)


# ---------------------------------------------------------------------------
# Tape
# ---------------------------------------------------------------------------


@dataclass
class Record:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Tape:
    """Ordered op records for one forward pass. Not shareable across threads."""

    records: list[Record] = field(default_factory=list)

    def __enter__(self) -> "Tape":
        stack = _tape_stack()
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _tape_stack().pop()

    def __len__(self) -> int:
        return len(self.records)


def _tape_stack() -> list[Tape]:
    stack = getattr(_local, "tapes", None)
    if stack is None:
        stack = _local.tapes = []
    return stack


def active_tape() -> Tape | None:
    stack = _tape_stack()
    return stack[-1] if stack else None


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Suspend recording; ops inside run as plain numpy."""
    stack = _tape_stack()
    saved = list(stack)
    stack.clear()
    try:
        yield
    finally:
        stack.extend(saved)


def _emit(op: str, out: np.ndarray, inputs: tuple[Tensor, ...], bwd) -> Tensor:
    tape = active_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    result = Tensor._wrap(out, requires_grad=needs)
    if needs:
        tape.records.append(Record(op, inputs, result, bwd))
    return result


def backward(tape: Tape, loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Gradients of a scalar ``loss`` with respect to every leaf requiring grad.

    Fan-out is handled by summing the contributions of each consumer.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    produced = {id(r.output) for r in tape.records}
    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape, dtype=_F64)}
    leaves: dict[int, Tensor] = {}
    if loss.requires_grad and id(loss) not in produced:
        leaves[id(loss)] = loss
    for rec in reversed(tape.records):
        g = grads.pop(id(rec.output), None)
        if g is None:
            continue
        for t, gi in zip(rec.inputs, rec.backward(g)):
            if gi is None or not t.requires_grad:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
            if key not in produced:
                leaves[key] = t
    dtype = get_dtype()
    return {t: np.asarray(grads[k], dtype=dtype).reshape(t.shape) for k, t in leaves.items() if k in grads}


# ---------------------------------------------------------------------------
# Primitives
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum of equal shapes, or a row-vector bias added to every row."""
    if a.shape == b.shape:
        return _emit("add", a.data + b.data, (a, b), lambda g: (g, g))
    if b.ndim == 1 and a.ndim >= 1 and a.shape[-1] == b.shape[0]:
        lead = tuple(range(a.ndim - 1))
        return _emit(
            "bias_add",
            a.data + b.data,
            (a, b),
            lambda g: (g, np.sum(g, axis=lead, dtype=_F64)),
        )
    raise ShapeError(f"add: shapes {a.shape} and {b.shape} are not equal and not a row-vector bias")


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} differ")
    ad, bd = a.data, b.data
    return _emit("mul", ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scale(a: Tensor, c: float) -> Tensor:
    return _emit("scale", a.data * c, (a,), lambda g: (g * c,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes must match exactly."""
    if a.ndim < 2 or a.ndim != b.ndim or a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    a64 = a.data.astype(_F64)
    b64 = b.data.astype(_F64)

    def bwd(g):
        return (
            np.matmul(g, np.swapaxes(b64, -1, -2)) if a.requires_grad else None,
            np.matmul(np.swapaxes(a64, -1, -2), g) if b.requires_grad else None,
        )

    return _emit("matmul", np.matmul(a64, b64), (a, b), bwd)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    if math.prod(shape) != a.data.size:
        raise ShapeError(f"reshape: {a.shape} has {a.data.size} elements, target {shape} does not")
    src = a.shape
    return _emit("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(src),))


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _emit("transpose", np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def expand(a: Tensor, shape: Sequence[int]) -> Tensor:
    """Explicit broadcast of size-1 axes to ``shape`` (ranks must already match)."""
    shape = tuple(shape)
    if a.ndim != len(shape) or any(s != t and s != 1 for s, t in zip(a.shape, shape)):
        raise ShapeError(f"expand: cannot expand {a.shape} to {shape}")
    axes = tuple(i for i, (s, t) in enumerate(zip(a.shape, shape)) if s == 1 and t != 1)
    return _emit(
        "expand",
        np.broadcast_to(a.data, shape),
        (a,),
        lambda g: (np.sum(g, axis=axes, keepdims=True, dtype=_F64),),
    )


def relu(a: Tensor) -> Tensor:
    pos = a.data > 0
    return _emit("relu", np.where(pos, a.data, 0), (a,), lambda g: (g * pos,))


def sum_all(a: Tensor) -> Tensor:
    src = a.shape
    return _emit(
        "sum",
        np.asarray(np.sum(a.data, dtype=_F64)),
        (a,),
        lambda g: (np.broadcast_to(g, src),),
    )


def softmax(a: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis.

    ``mask`` is a boolean array broadcastable to ``a``; False entries receive
    probability zero. Rows with nothing allowed come out as all zeros.
    """
    x = a.data.astype(_F64)
    if mask is not None:
        x = np.where(mask, x, -np.inf)
    m = np.max(x, axis=-1, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    e = np.exp(x - m)
    s = np.sum(e, axis=-1, keepdims=True)
    p = e / np.where(s > 0, s, 1.0)

    def bwd(g):
        return (p * (g - np.sum(g * p, axis=-1, keepdims=True)),)

    return _emit("softmax", p, (a,), bwd)


def rms_norm(a: Tensor, weight: Tensor, eps: float = 1e-6) -> Tensor:
    """``x / sqrt(mean(x**2) + eps) * weight`` over the last axis (no centering)."""
    if weight.shape != (a.shape[-1],):
        raise ShapeError(f"rms_norm: weight {weight.shape} does not match features of {a.shape}")
    x = a.data.astype(_F64)
    w = weight.data.astype(_F64)
    n = x.shape[-1]
    inv = 1.0 / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + eps)
    xhat = x * inv
    lead = tuple(range(x.ndim - 1))

    def bwd(g):
        gx = g * w
        dx = inv * (gx - xhat * np.sum(gx * xhat, axis=-1, keepdims=True) / n)
        return dx, np.sum(g * xhat, axis=lead)

    return _emit("rms_norm", xhat * w, (a, weight), bwd)


def embedding(table: Tensor, ids) -> Tensor:
    """Row lookup: output shape is ``ids.shape + (table.shape[1],)``."""
    ids = np.asarray(ids, dtype=np.int64)
    if table.ndim != 2:
        raise ShapeError(f"embedding: table must be 2-D, got {table.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ContractError(f"embedding: ids outside [0, {table.shape[0]})")
    rows, dim = table.shape

    def bwd(g):
        flat = ids.reshape(-1)
        gt = np.zeros((rows, dim), dtype=_F64)
        np.add.at(gt, flat, g.reshape(-1, dim))
        return (gt,)

    return _emit("embedding", table.data[ids], (table,), bwd)


def cross_entropy(logits: Tensor, targets, ignore_id: int) -> Tensor:
    """Mean negative log-likelihood of ``targets`` under row-wise softmax of ``logits``.

    Positions whose target equals ``ignore_id`` are excluded from the mean.
    """
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy: logits must be [T, V], got {logits.shape}")
    targets = np.asarray(targets, dtype=np.int64)
    if targets.shape != logits.shape[:1]:
        raise ShapeError(f"cross_entropy: {targets.shape[0] if targets.ndim else 0} targets for {logits.shape[0]} rows")
    keep = targets != ignore_id
    n = int(keep.sum())
    if n == 0:
        raise ContractError("cross_entropy: every position is ignored, mean is undefined")
    vocab = logits.shape[1]
    kept_targets = targets[keep]
    if kept_targets.min() < 0 or kept_targets.max() >= vocab:
        raise ContractError(f"cross_entropy: target ids outside [0, {vocab})")
    rows = np.nonzero(keep)[0]
    x = logits.data[rows].astype(_F64)
    m = np.max(x, axis=1, keepdims=True)
    shifted = x - m
    lse = np.log(np.sum(np.exp(shifted), axis=1))
    picked = shifted[np.arange(n), kept_targets]
    loss = float(np.sum(lse - picked)) / n

    def bwd(g):
        p = np.exp(shifted - lse[:, None])
        p[np.arange(n), kept_targets] -= 1.0
        full = np.zeros(logits.shape, dtype=_F64)
        full[rows] = p * (float(g) / n)
        return (full,)

    return _emit("cross_entropy", np.asarray(loss), (logits,), bwd)
