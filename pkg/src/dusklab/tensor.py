"""Dense float64 tensors with tape-based reverse-mode autodiff.

A ``Tape`` records every differentiable operation executed while it is
active (``with Tape() as tape: ...``).  ``tape.backward(loss)`` replays the
records in reverse and returns a gradient per watched leaf.  Tensors carry
no graph state of their own beyond a handle onto the tape that produced
them, so the graph is rebuilt from scratch on every forward pass.

Everything is float64 and CPU-only; values produced by public ops are kept
finite unless the caller explicitly divides by zero.
"""

from __future__ import annotations

import struct
import threading
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np


class ShapeMismatch(ValueError):
    """Operands cannot be broadcast / contracted together."""


class TapeError(RuntimeError):
    """Backward called on a consumed tape, a non-scalar, or off-tape value."""


_LOCAL = threading.local()


def _stack() -> list:
    stack = getattr(_LOCAL, "tapes", None)
    if stack is None:
        stack = _LOCAL.tapes = []
    return stack


def active_tape() -> Optional["Tape"]:
    """The innermost live tape on this thread, or None."""
    stack = _stack()
    return stack[-1] if stack else None


@dataclass
class TapeNode:
    node_id: int
    parents: tuple          # parent node ids, None entries are untraced inputs
    backward: Optional[Callable]  # grad_out -> per-parent grads; None for leaves
    name: str = ""


class Tape:
    """Ordered record of one forward pass.

    Nodes are appended in execution order, so every node's parents precede
    it and ``backward`` can do a single reverse sweep.  A tape is consumed
    by ``backward``; call ``reset`` to reuse it.
    """

    def __init__(self):
        self.nodes: list[TapeNode] = []
        self.next_id = 0
        self._leaf_ids: dict[int, int] = {}   # id(tensor) -> node id
        self._watched: dict[int, "Tensor"] = {}  # node id -> leaf tensor
        self._consumed = False

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, *exc):
        _stack().pop()
        return False

    def reset(self) -> None:
        self.nodes.clear()
        self.next_id = 0
        self._leaf_ids.clear()
        self._watched.clear()
        self._consumed = False

    def _record(self, parents: tuple, backward: Callable, name: str) -> int:
        nid = self.next_id
        self.next_id += 1
        self.nodes.append(TapeNode(nid, parents, backward, name))
        return nid

    def watch(self, t: "Tensor") -> int:
        """Register a leaf tensor; repeated calls reuse the same node."""
        nid = self._leaf_ids.get(id(t))
        if nid is None:
            nid = self._record((), None, "leaf")
            self._leaf_ids[id(t)] = nid
            self._watched[nid] = t
        return nid

    def backward(self, loss: "Tensor") -> dict:
        """Accumulate d(loss)/d(leaf) for every watched leaf.

        Returns a mapping Tensor -> ndarray (same shape as the leaf).  Also
        accumulates into each leaf's ``.grad``.  The tape is consumed.
        """
        if self._consumed:
            raise TapeError("tape already consumed by backward; call reset() first")
        if loss.data.size != 1:
            raise TapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss.tape is not self or loss.node_id is None:
            raise TapeError("loss is not a value recorded on this tape")
        self._consumed = True

        grads: dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.data)}
        for node in reversed(self.nodes[: loss.node_id + 1]):
            if node.backward is None:
                continue  # leaves keep their entry for collection below
            g = grads.pop(node.node_id, None)
            if g is None:
                continue
            for pid, pg in zip(node.parents, node.backward(g)):
                if pid is None or pg is None:
                    continue
                prev = grads.get(pid)
                grads[pid] = pg if prev is None else prev + pg

        out: dict["Tensor", np.ndarray] = {}
        for nid, leaf in self._watched.items():
            g = grads.get(nid)
            if g is None:
                g = np.zeros_like(leaf.data)
            out[leaf] = g
            leaf.grad = g if leaf.grad is None else leaf.grad + g
        return out


class Tensor:
    """Row-major float64 array plus an optional handle onto a tape."""

    __slots__ = ("data", "requires_grad", "grad", "tape", "node_id")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim and not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)  # keep 0-d scalars 0-d
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.tape: Optional[Tape] = None
        self.node_id: Optional[int] = None

    # -- metadata ---------------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        """A constant view of the same values (shares the buffer)."""
        t = Tensor.__new__(Tensor)
        t.data = self.data
        t.requires_grad = False
        t.grad = None
        t.tape = None
        t.node_id = None
        return t

    def copy(self) -> "Tensor":
        return Tensor(self.data.copy(), requires_grad=self.requires_grad)

    def __repr__(self):
        tag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{tag})"

    # -- operators ---------------------------------------------------------
    def __add__(self, other):
        return elementwise("add", self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return elementwise("sub", self, other)

    def __rsub__(self, other):
        return elementwise("sub", as_tensor(other), self)

    def __mul__(self, other):
        return elementwise("mul", self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return elementwise("div", self, other)

    def __rtruediv__(self, other):
        return elementwise("div", as_tensor(other), self)

    def __pow__(self, exponent):
        return elementwise("pow", self, exponent)

    def __neg__(self):
        return elementwise("neg", self)

    def __matmul__(self, other):
        return matmul(self, other)

    def exp(self):
        return elementwise("exp", self)

    def log(self):
        return elementwise("log", self)

    def sum(self, axes=None, keepdims: bool = False):
        return reduce("sum", self, axes, keepdims)

    def mean(self, axes=None, keepdims: bool = False):
        return reduce("mean", self, axes, keepdims)

    def max(self, axes=None, keepdims: bool = False):
        return reduce("max", self, axes, keepdims)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], (tuple, list)) else shape)

    def transpose(self, axes=None):
        return transpose(self, axes)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _trace_id(tape: Tape, t: Tensor) -> Optional[int]:
    """Node id of t on `tape`; watches fresh grad-requiring leaves; None = constant."""
    if t.tape is tape and t.node_id is not None:
        return t.node_id
    if t.tape is None and t.requires_grad:
        return tape.watch(t)
    return None  # values from other tapes are constants here


def _emit(out_data: np.ndarray, inputs: Sequence[Tensor], make_backward, name: str) -> Tensor:
    """Wrap op output; record a node if a live tape traces any input.

    ``make_backward(needs)`` builds the backward closure given a tuple of
    booleans saying which inputs actually require gradient flow, so ops can
    skip dead computations (e.g. weight grads of frozen layers).
    """
    out = Tensor(out_data)
    tape = active_tape()
    if tape is None:
        return out
    ids = tuple(_trace_id(tape, t) for t in inputs)
    if all(i is None for i in ids):
        return out
    needs = tuple(i is not None for i in ids)
    out.tape = tape
    out.node_id = tape._record(ids, make_backward(needs), name)
    return out


def broadcast_shape(s1: Sequence[int], s2: Sequence[int]) -> tuple:
    """Numpy-style broadcast of two shapes (trailing singleton dims expand)."""
    try:
        return np.broadcast_shapes(tuple(s1), tuple(s2))
    except ValueError:
        raise ShapeMismatch(f"shapes {tuple(s1)} and {tuple(s2)} do not broadcast") from None


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum grad over the axes that broadcasting expanded to reach `shape`."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


_UNARY_KINDS = ("exp", "log", "neg", "relu_", "sigmoid_")
_BINARY_KINDS = ("add", "sub", "mul", "div", "pow")


def elementwise(op_kind: str, a, b=None) -> Tensor:
    """Pointwise arithmetic with numpy broadcasting.

    Binary kinds: add, sub, mul, div, pow (pow takes a scalar exponent).
    Unary kinds: exp, log, neg.  log raises on non-positive input.
    """
    a = as_tensor(a)
    if op_kind in ("exp", "log", "neg"):
        x = a.data
        if op_kind == "exp":
            out = np.exp(x)
            return _emit(out, (a,), lambda needs: lambda g: (g * out,), "exp")
        if op_kind == "log":
            if np.any(x <= 0.0):
                raise ValueError(f"log of non-positive value (min={x.min()})")
            return _emit(np.log(x), (a,), lambda needs: lambda g: (g / x,), "log")
        return _emit(-x, (a,), lambda needs: lambda g: (-g,), "neg")

    if op_kind == "pow":
        if isinstance(b, Tensor) or not np.isscalar(b):
            raise ValueError("pow supports scalar exponents only")
        p = float(b)
        x = a.data
        out = x ** p
        return _emit(out, (a,), lambda needs: lambda g: (g * p * x ** (p - 1.0),), "pow")

    if op_kind not in ("add", "sub", "mul", "div"):
        raise ValueError(f"unknown elementwise kind {op_kind!r}")

    b = as_tensor(b)
    broadcast_shape(a.shape, b.shape)  # raises ShapeMismatch with both shapes
    xa, xb = a.data, b.data
    sa, sb = a.shape, b.shape
    if op_kind == "add":
        out, bwd = xa + xb, lambda g: (g, g)
    elif op_kind == "sub":
        out, bwd = xa - xb, lambda g: (g, -g)
    elif op_kind == "mul":
        out, bwd = xa * xb, lambda g: (g * xb, g * xa)
    else:
        out, bwd = xa / xb, lambda g: (g / xb, -g * xa / (xb * xb))

    def make_backward(needs):
        def backward(g):
            ga, gb = bwd(g)
            return (
                _unbroadcast(ga, sa) if needs[0] else None,
                _unbroadcast(gb, sb) if needs[1] else None,
            )
        return backward

    return _emit(out, (a, b), make_backward, op_kind)


def _normalize_axes(axes, ndim: int) -> tuple:
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    axes = tuple(int(ax) for ax in axes)
    norm = tuple(ax + ndim if ax < 0 else ax for ax in axes)
    for ax in norm:
        if not 0 <= ax < ndim:
            raise ValueError(f"axis {ax} out of range for rank {ndim}")
    if len(set(norm)) != len(norm):
        raise ValueError(f"duplicate axes in {axes}")
    return norm


def reduce(op_kind: str, a, axes=None, keepdims: bool = False) -> Tensor:
    """sum / mean / max over the given axes (all axes when None).

    max routes its gradient to the first maximal element in row-major order
    over the reduced block, so ties are deterministic.
    """
    a = as_tensor(a)
    axes_n = _normalize_axes(axes, a.ndim)
    x = a.data
    shape = x.shape

    if op_kind in ("sum", "mean"):
        out = x.sum(axis=axes_n, keepdims=keepdims)
        count = 1
        for ax in axes_n:
            count *= shape[ax]
        if op_kind == "mean":
            out = out / count

        def make_backward(needs, _count=count, _kind=op_kind):
            def backward(g):
                gg = g
                if not keepdims:
                    gg = np.expand_dims(gg, axes_n) if axes_n else gg
                gg = np.broadcast_to(gg, shape).copy()
                if _kind == "mean":
                    gg /= _count
                return (gg,)
            return backward

        return _emit(out, (a,), make_backward, op_kind)

    if op_kind != "max":
        raise ValueError(f"unknown reduce kind {op_kind!r}")

    kept = tuple(i for i in range(a.ndim) if i not in axes_n)
    perm = kept + axes_n
    block = 1
    for ax in axes_n:
        block *= shape[ax]
    xt = x.transpose(perm).reshape(tuple(shape[i] for i in kept) + (block,))
    idx = np.argmax(xt, axis=-1)  # first occurrence on ties
    out = np.take_along_axis(xt, idx[..., None], axis=-1)[..., 0]
    if keepdims:
        out = np.expand_dims(out, axes_n) if axes_n else out

    def make_backward(needs):
        def backward(g):
            gg = g
            if keepdims and axes_n:
                gg = gg.reshape(tuple(shape[i] for i in kept))
            scat = np.zeros_like(xt)
            np.put_along_axis(scat, idx[..., None], gg[..., None], axis=-1)
            scat = scat.reshape(tuple(shape[i] for i in perm))
            inv = np.argsort(perm)
            return (scat.transpose(inv),)
        return backward

    return _emit(out, (a,), make_backward, "max")


def matmul(a, b) -> Tensor:
    """2-D matrix product with gradients for both operands."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeMismatch(f"matmul expects 2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"inner dimensions disagree: {a.shape} @ {b.shape}")
    xa, xb = a.data, b.data

    def make_backward(needs):
        def backward(g):
            return (
                g @ xb.T if needs[0] else None,
                xa.T @ g if needs[1] else None,
            )
        return backward

    return _emit(xa @ xb, (a, b), make_backward, "matmul")


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    out = a.data.reshape(shape)
    return _emit(out, (a,), lambda needs: lambda g: (g.reshape(old),), "reshape")


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _emit(a.data.transpose(axes), (a,), lambda needs: lambda g: (g.transpose(inv),), "transpose")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    """Concatenate along an existing axis; gradient splits back."""
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    split_at = np.cumsum(sizes)[:-1]

    def make_backward(needs):
        def backward(g):
            parts = np.split(g, split_at, axis=axis)
            return tuple(p if need else None for p, need in zip(parts, needs))
        return backward

    return _emit(out, tensors, make_backward, "concat")


def backward(loss: Tensor) -> dict:
    """Run reverse-mode on the tape that produced `loss`."""
    if loss.tape is None:
        raise TapeError("loss was not recorded on any tape")
    return loss.tape.backward(loss)


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-6) -> float:
    """Max relative error between tape gradients and central differences.

    `f` must map one tensor to a scalar tensor and be a pure function of its
    argument.  The per-coordinate error is |analytic - numeric| divided by
    max(1, |analytic|, |numeric|).
    """
    x0 = np.array(x.data, dtype=np.float64)
    with Tape() as tape:
        xv = Tensor(x0.copy(), requires_grad=True)
        y = f(xv)
    if not isinstance(y, Tensor) or y.data.size != 1:
        raise ValueError("grad_check needs a scalar-valued function")
    analytic = tape.backward(y).get(xv)
    if analytic is None:
        analytic = np.zeros_like(x0)

    numeric = np.empty_like(x0)
    flat = x0.reshape(-1)
    num_flat = numeric.reshape(-1)
    for i in range(flat.size):
        bump = flat.copy()
        bump[i] += h
        hi = f(Tensor(bump.reshape(x0.shape))).item()
        bump[i] -= 2.0 * h
        lo = f(Tensor(bump.reshape(x0.shape))).item()
        num_flat[i] = (hi - lo) / (2.0 * h)

    denom = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    return float(np.max(np.abs(analytic - numeric) / denom))


# Registry of differentiable primitives for the blanket gradient sweep run
# by the test suite and selftest.  Each entry builds (f, x) from a seeded rng;
# f(x) must be scalar.  layers.py appends its kernels on import.
PRIMITIVE_CHECKS: list = []


def _register_core_primitives():
    def entry(name, builder):
        PRIMITIVE_CHECKS.append((name, builder))

    def rand(rng, shape, lo=-1.0, hi=1.0):
        return Tensor(rng.uniform(lo, hi, size=shape))

    entry("add", lambda rng: (lambda t, o=rand(rng, (3, 4)): (t + o).sum(), rand(rng, (3, 4))))
    entry("sub", lambda rng: (lambda t, o=rand(rng, (3, 4)): ((t - o) * (t - o)).sum(), rand(rng, (3, 4))))
    entry("mul", lambda rng: (lambda t, o=rand(rng, (3, 4)): (t * o).sum(), rand(rng, (3, 4))))
    entry("div", lambda rng: (lambda t, o=rand(rng, (3, 4), 0.5, 2.0): (t / o).sum(), rand(rng, (3, 4))))
    entry("pow", lambda rng: (lambda t: (t ** 3.0).sum(), rand(rng, (3, 4), 0.2, 2.0)))
    entry("exp", lambda rng: (lambda t: t.exp().sum(), rand(rng, (3, 4))))
    entry("log", lambda rng: (lambda t: t.log().sum(), rand(rng, (3, 4), 0.5, 3.0)))
    entry("neg", lambda rng: (lambda t: ((-t) * (-t)).sum(), rand(rng, (3, 4))))
    entry("broadcast_mul", lambda rng: (lambda t, o=rand(rng, (1, 4)): (t * o).sum(), rand(rng, (3, 4))))
    entry("sum_axis", lambda rng: (lambda t: (t.sum(axes=1) ** 2.0).sum(), rand(rng, (3, 4))))
    entry("mean", lambda rng: (lambda t: (t.mean(axes=(0,)) ** 2.0).sum(), rand(rng, (3, 4))))
    entry("max", lambda rng: (lambda t: (t.max(axes=1) ** 2.0).sum(), rand(rng, (3, 4))))
    entry("matmul", lambda rng: (lambda t, o=rand(rng, (4, 2)): (t @ o).sum(), rand(rng, (3, 4))))
    entry("transpose", lambda rng: (lambda t: (t.transpose() @ t).sum(), rand(rng, (3, 4))))
    entry("reshape", lambda rng: (lambda t: (t.reshape(12) ** 2.0).sum(), rand(rng, (3, 4))))
    entry("concat", lambda rng: (lambda t, o=rand(rng, (3, 4)): (concat([t, o], axis=1) ** 2.0).sum(), rand(rng, (3, 4))))


_register_core_primitives()


# -- NTT1 tensor serialization ---------------------------------------------
# header: magic "NTT1", rank u32 LE, dims u32[rank] LE; payload: f64 LE,
# row-major.  Used by dataset files and checkpoints.

NTT_MAGIC = b"NTT1"


def ntt_bytes(arr: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(arr, dtype=np.float64)
    head = NTT_MAGIC + struct.pack("<I", arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape) if arr.ndim else b""
    return head + arr.astype("<f8").tobytes(order="C")


def ntt_from_bytes(blob: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Decode one NTT1 record; returns (array, bytes consumed)."""
    if blob[offset : offset + 4] != NTT_MAGIC:
        raise ValueError("bad NTT1 magic")
    (rank,) = struct.unpack_from("<I", blob, offset + 4)
    dims = struct.unpack_from(f"<{rank}I", blob, offset + 8)
    start = offset + 8 + 4 * rank
    count = int(np.prod(dims, dtype=np.int64)) if rank else 1
    end = start + 8 * count
    arr = np.frombuffer(blob[start:end], dtype="<f8").reshape(dims).astype(np.float64)
    return arr, end - offset


def write_ntt(path, arr: np.ndarray) -> None:
    with open(path, "wb") as fh:
        fh.write(ntt_bytes(arr))


def read_ntt(path) -> np.ndarray:
    with open(path, "rb") as fh:
        arr, _ = ntt_from_bytes(fh.read())
    return arr
