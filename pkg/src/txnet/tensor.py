"""Dense NCHW tensors with a reverse-mode differentiation tape.

A :class:`Tensor` wraps a contiguous numpy buffer of at most four extents.
Every differentiable operation that touches a tensor with ``requires_grad``
records a :class:`Node` on its output; :func:`backward` collects the nodes
reachable from a scalar loss into a :class:`Tape` and replays it in reverse.

Broadcasting is deliberately narrow: the second operand of an elementwise op
may be a Python scalar, a per-channel ``[1, C, 1, 1]`` tensor, or a tensor that
differs from the first only by a leading batch extent of one.
"""
from __future__ import annotations

import itertools
import math
import os
import threading
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, ShapeError, SizeError, SplitError

MAX_RANK = 4
MAX_ELEMENTS = 2**40
DEFAULT_DTYPE = np.float32
_FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))

_ids = itertools.count()
_state = threading.local()
_debug_default = os.environ.get("TXNET_DEBUG", "") not in ("", "0")

# name -> callable, filled by @register_op; the gradient suite iterates this.
OP_REGISTRY: dict[str, Callable] = {}


def register_op(name: str):
    def deco(fn):
        OP_REGISTRY[name] = fn
        return fn

    return deco


def is_debug() -> bool:
    return getattr(_state, "debug", _debug_default)


def set_debug(flag: bool) -> None:
    """Enable NaN/Inf sentinels after every op on the current thread."""
    _state.debug = bool(flag)


@contextmanager
def debug_mode(flag: bool = True):
    prev = is_debug()
    set_debug(flag)
    try:
        yield
    finally:
        set_debug(prev)


def _check_shape(shape: Sequence[int]) -> tuple[int, ...]:
    shape = tuple(int(s) for s in shape)
    if len(shape) > MAX_RANK:
        raise ShapeError(f"rank {len(shape)} exceeds {MAX_RANK}")
    if any(s < 1 for s in shape):
        raise SizeError(f"all extents must be >= 1, got {list(shape)}")
    if math.prod(shape) > MAX_ELEMENTS:
        raise SizeError(f"element count of {list(shape)} overflows")
    return shape


def _as_dtype(dtype) -> np.dtype:
    dt = np.dtype(DEFAULT_DTYPE if dtype is None else dtype)
    if dt not in _FLOAT_DTYPES:
        raise ContractError(f"unsupported element type {dt}; use float32 or float64")
    return dt


class Tensor:
    """N×C×H×W array node. Data is never mutated after construction; only ``grad`` is."""

    __slots__ = ("data", "requires_grad", "grad", "_node", "_id", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is None and arr.dtype in _FLOAT_DTYPES:
            dtype = arr.dtype
        arr = np.ascontiguousarray(arr, dtype=_as_dtype(dtype))
        if arr.ndim == 0:
            arr = arr.reshape(1)
        _check_shape(arr.shape)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._node: Node | None = None
        self._id = next(_ids)

    @classmethod
    def _from_op(cls, data: np.ndarray, requires_grad: bool) -> "Tensor":
        t = cls.__new__(cls)
        t.data = np.ascontiguousarray(data)
        t.requires_grad = requires_grad
        t.grad = None
        t._node = None
        t._id = next(_ids)
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        if self.size != 1:
            raise ContractError(f"item() needs a single element, shape is {list(self.shape)}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor._from_op(self.data, False)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={list(self.shape)}, dtype={self.dtype.name}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self) -> None:
        backward(self)


@dataclass(eq=False)
class Node:
    """One recorded operation: inputs plus a rule mapping output grad to input grads."""

    op: str
    inputs: tuple[Tensor, ...]
    rule: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class TapeEntry:
    op: str
    input_ids: tuple[int, ...]
    output_id: int
    output: Tensor
    node: Node


class Tape:
    """Topologically ordered list of recorded ops reachable from one output.

    Tensor ids grow with creation order and an op's inputs always exist before
    its output, so sorting by output id is a valid topological order.
    """

    def __init__(self, entries: list[TapeEntry], leaves: list[Tensor]):
        self.entries = entries
        self.leaves = leaves

    @classmethod
    def from_output(cls, out: Tensor) -> "Tape":
        seen: set[int] = set()
        entries: list[TapeEntry] = []
        leaves: list[Tensor] = []
        stack = [out]
        while stack:
            t = stack.pop()
            if t._id in seen or not t.requires_grad:
                continue
            seen.add(t._id)
            node = t._node
            if node is None:
                leaves.append(t)
                continue
            entries.append(TapeEntry(node.op, tuple(i._id for i in node.inputs), t._id, t, node))
            stack.extend(node.inputs)
        entries.sort(key=lambda e: e.output_id)
        leaves.sort(key=lambda t: t._id)
        return cls(entries, leaves)

    def __len__(self):
        return len(self.entries)

    def run(self, seed: np.ndarray) -> dict[int, np.ndarray]:
        """Propagate ``seed`` (d loss / d output) backwards; returns grads by tensor id."""
        if not self.entries:
            return {}
        grads: dict[int, np.ndarray] = {self.entries[-1].output_id: seed}
        for entry in reversed(self.entries):
            g = grads.get(entry.output_id)
            if g is None:
                continue
            entry.output.grad = g
            in_grads = entry.node.rule(g)
            for t, gi in zip(entry.node.inputs, in_grads):
                if gi is None or not t.requires_grad:
                    continue
                if gi.shape != t.shape:
                    raise ContractError(
                        f"backward rule of {entry.op} produced grad {list(gi.shape)} "
                        f"for input {list(t.shape)}"
                    )
                gi = gi.astype(t.dtype, copy=False)
                prev = grads.get(t._id)
                grads[t._id] = gi if prev is None else prev + gi
        return grads


def backward(loss: Tensor) -> Tape:
    """Fill ``grad`` on every requires-grad tensor reachable from a single-element ``loss``.

    Existing gradients are overwritten, not accumulated.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a single-element loss, got shape {list(loss.shape)}")
    if not loss.requires_grad:
        raise ContractError("loss does not depend on any tensor with requires_grad")
    tape = Tape.from_output(loss)
    seed = np.ones(loss.shape, dtype=loss.dtype)
    if not tape.entries:
        loss.grad = seed
        return tape
    grads = tape.run(seed)
    for leaf in tape.leaves:
        g = grads.get(leaf._id)
        leaf.grad = np.zeros_like(leaf.data) if g is None else g
    return tape


def _record(op: str, data: np.ndarray, inputs: Sequence[Tensor], rule) -> Tensor:
    if is_debug() and not np.all(np.isfinite(data)):
        raise FloatingPointError(f"{op} produced non-finite values")
    rg = any(t.requires_grad for t in inputs)
    out = Tensor._from_op(data, rg)
    if rg:
        out._node = Node(op, tuple(inputs), rule)
    return out


@contextmanager
def flop_trace():
    """Collect ``(op, flops)`` pairs for every costed op executed on this thread.

    Costs follow the one-multiply-accumulate-equals-one-FLOP convention; pooling,
    softmax and normalization cost one op per input element.
    """
    prev = getattr(_state, "flop_log", None)
    log: list[tuple[str, int]] = []
    _state.flop_log = log
    try:
        yield log
    finally:
        _state.flop_log = prev


def _trace(op: str, flops: int) -> None:
    log = getattr(_state, "flop_log", None)
    if log is not None:
        log.append((op, int(flops)))


# ---------------------------------------------------------------- factories


def full(shape: Sequence[int], value: float, dtype=None) -> Tensor:
    shape = _check_shape(shape)
    return Tensor._from_op(np.full(shape, value, dtype=_as_dtype(dtype)), False)


def zeros(shape: Sequence[int], dtype=None) -> Tensor:
    return full(shape, 0.0, dtype)


def ones(shape: Sequence[int], dtype=None) -> Tensor:
    return full(shape, 1.0, dtype)


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


# -------------------------------------------------------------- elementwise


def _broadcast_kind(a: Tensor, b) -> str:
    if not isinstance(b, Tensor):
        return "scalar"
    if a.shape == b.shape:
        return "same"
    if a.ndim == 4 and b.shape == (1, a.shape[1], 1, 1):
        return "channel"
    if a.ndim == b.ndim and a.ndim >= 2 and b.shape[0] == 1 and b.shape[1:] == a.shape[1:]:
        return "batch"
    raise ShapeError(f"cannot broadcast {list(b.shape)} onto {list(a.shape)}")


def _reduce_to(g: np.ndarray, kind: str) -> np.ndarray:
    if kind == "same":
        return g
    if kind == "channel":
        return g.sum(axis=(0, 2, 3), keepdims=True)
    return g.sum(axis=0, keepdims=True)


def _scalar(a: Tensor, b) -> np.ndarray:
    return np.asarray(b, dtype=a.dtype)


@register_op("add")
def add(a: Tensor, b) -> Tensor:
    kind = _broadcast_kind(a, b)
    if kind == "scalar":
        return _record("add", a.data + _scalar(a, b), (a,), lambda g: (g,))
    return _record("add", a.data + b.data, (a, b), lambda g: (g, _reduce_to(g, kind)))


@register_op("sub")
def sub(a: Tensor, b) -> Tensor:
    kind = _broadcast_kind(a, b)
    if kind == "scalar":
        return _record("sub", a.data - _scalar(a, b), (a,), lambda g: (g,))
    return _record("sub", a.data - b.data, (a, b), lambda g: (g, -_reduce_to(g, kind)))


@register_op("mul")
def mul(a: Tensor, b) -> Tensor:
    kind = _broadcast_kind(a, b)
    if kind == "scalar":
        return scale(a, b)
    ad, bd = a.data, b.data
    return _record("mul", ad * bd, (a, b), lambda g: (g * bd, _reduce_to(g * ad, kind)))


@register_op("scale")
def scale(a: Tensor, s: float) -> Tensor:
    s = _scalar(a, s)
    return _record("scale", a.data * s, (a,), lambda g: (g * s,))


# ---------------------------------------------------------------- reductions


@register_op("sum")
def sum_all(x: Tensor) -> Tensor:
    """Sum of every element, returned as a one-element tensor."""
    shape = x.shape
    out = np.asarray(x.data.sum(dtype=x.dtype), dtype=x.dtype).reshape(1)
    return _record("sum", out, (x,), lambda g: (np.broadcast_to(g.reshape(()), shape).copy(),))


@register_op("sum_axis")
def sum_axis(x: Tensor, axis: int) -> Tensor:
    """Sum over one axis, keeping it as a size-1 extent."""
    axis = _norm_axis(axis, x.ndim)
    shape = x.shape
    out = x.data.sum(axis=axis, keepdims=True)
    return _record("sum_axis", out, (x,), lambda g: (np.broadcast_to(g, shape).copy(),))


def _norm_axis(axis: int, ndim: int) -> int:
    if not -ndim <= axis < ndim:
        raise ContractError(f"axis {axis} out of range for rank {ndim}")
    return axis % ndim


# ------------------------------------------------------------------- layout


@register_op("reshape")
def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = _check_shape(shape)
    if math.prod(shape) != x.size:
        raise ShapeError(f"cannot reshape {list(x.shape)} to {list(shape)}")
    src = x.shape
    return _record("reshape", x.data.reshape(shape), (x,), lambda g: (g.reshape(src),))


@register_op("permute")
def permute(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ContractError(f"{axes} is not a permutation of {x.ndim} axes")
    inv = tuple(np.argsort(axes))
    out = np.ascontiguousarray(x.data.transpose(axes))
    return _record("permute", out, (x,), lambda g: (np.ascontiguousarray(g.transpose(inv)),))


@register_op("matmul")
def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched product over the last two axes; leading extents must match exactly."""
    if a.ndim < 2 or a.ndim != b.ndim or a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul of {list(a.shape)} and {list(b.shape)}")
    ad, bd = a.data, b.data
    _trace("matmul", math.prod(a.shape) * b.shape[-1])

    def rule(g):
        return g @ np.swapaxes(bd, -1, -2), np.swapaxes(ad, -1, -2) @ g

    return _record("matmul", ad @ bd, (a, b), rule)


@register_op("split_channels")
def split_channels(x: Tensor, parts: int) -> list[Tensor]:
    """Split axis 1 into ``parts`` equal, ordered blocks (each a copy)."""
    if x.ndim < 2:
        raise ShapeError(f"split_channels needs rank >= 2, got {list(x.shape)}")
    c = x.shape[1]
    if parts < 1 or c % parts:
        raise SplitError(f"{c} channels cannot be split into {parts} parts")
    return split_sizes(x, [c // parts] * parts)


def split_sizes(x: Tensor, sizes: Sequence[int]) -> list[Tensor]:
    """Split axis 1 into consecutive blocks of the given sizes."""
    if sum(sizes) != x.shape[1] or any(s < 1 for s in sizes):
        raise SplitError(f"sizes {list(sizes)} do not partition {x.shape[1]} channels")
    outs = []
    start = 0
    for s in sizes:
        lo, hi = start, start + s
        start = hi

        def rule(g, lo=lo, hi=hi):
            full_g = np.zeros(x.shape, dtype=g.dtype)
            full_g[:, lo:hi] = g
            return (full_g,)

        outs.append(_record("split_channels", x.data[:, lo:hi].copy(), (x,), rule))
    return outs


@register_op("concat_channels")
def concat_channels(xs: Sequence[Tensor]) -> Tensor:
    """Concatenate along axis 1 in argument order."""
    xs = list(xs)
    if not xs:
        raise ContractError("concat_channels needs at least one tensor")
    ref = xs[0].shape
    for t in xs[1:]:
        if t.ndim != len(ref) or t.shape[:1] + t.shape[2:] != ref[:1] + ref[2:]:
            raise ShapeError(f"cannot concat {list(t.shape)} with {list(ref)} along channels")
    bounds = np.cumsum([0] + [t.shape[1] for t in xs])

    def rule(g):
        return tuple(g[:, bounds[i]:bounds[i + 1]].copy() for i in range(len(xs)))

    return _record("concat_channels", np.concatenate([t.data for t in xs], axis=1), xs, rule)


@register_op("slice_spatial")
def slice_spatial(x: Tensor, h0: int, h1: int, w0: int, w1: int) -> Tensor:
    """Copy of ``x[:, :, h0:h1, w0:w1]`` for a 4-D tensor."""
    if x.ndim != 4 or not (0 <= h0 < h1 <= x.shape[2] and 0 <= w0 < w1 <= x.shape[3]):
        raise ShapeError(f"invalid spatial slice [{h0}:{h1}, {w0}:{w1}] of {list(x.shape)}")

    def rule(g):
        full_g = np.zeros(x.shape, dtype=g.dtype)
        full_g[:, :, h0:h1, w0:w1] = g
        return (full_g,)

    return _record("slice_spatial", x.data[:, :, h0:h1, w0:w1].copy(), (x,), rule)
