"""Reverse-mode automatic differentiation on dense float64 tensors.

A ``Tape`` records operations as they execute (define-by-run).  Every op
appends one node holding vector-Jacobian callbacks for its inputs;
``Tape.gradient`` walks the node list in reverse and accumulates adjoints.
Tensors are thin wrappers over C-contiguous float64 numpy arrays.  There is
no broadcasting except scalar-with-tensor: elementwise ops demand identical
shapes and raise ``ShapeError`` otherwise.

``Dual`` carries a (primal, tangent) pair for forward-mode directional
derivatives.  Tangents are built out of the same taped ops, so a tangent
stays differentiable by a later reverse pass; this is what keeps the
time-derivative residual first-order on the tape.
"""

from __future__ import annotations

import numbers
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "Dual",
    "ShapeError",
    "TapeError",
    "leaf",
    "constant",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "matmul",
    "sigmoid",
    "tanh",
    "softmax_rows",
    "concat",
    "stack_rows",
    "narrow",
    "reshape",
    "transpose",
    "add_bias",
    "tile_rows",
    "sum_rows",
    "sum_all",
    "mean_all",
    "square",
    "frobenius_sq",
    "additive_scores",
    "attn_context",
    "set_strict_finite",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested op."""


class TapeError(RuntimeError):
    """Misuse of the tape: detached loss, repeated backward, no active tape."""


_STRICT_FINITE = False


def set_strict_finite(enabled: bool) -> None:
    """When enabled, every op output is checked for NaN/Inf (slow; for tests)."""
    global _STRICT_FINITE
    _STRICT_FINITE = bool(enabled)


# one tape stack per thread so independent samples can run concurrently
_LOCAL = threading.local()


def _stack() -> list:
    stack = getattr(_LOCAL, "tapes", None)
    if stack is None:
        stack = _LOCAL.tapes = []
    return stack


def _active_tape() -> "Tape | None":
    stack = _stack()
    return stack[-1] if stack else None


class Tensor:
    """Dense float64 array, optionally attached to the tape that produced it."""

    __slots__ = ("value", "tape", "node", "watched")

    def __init__(self, value, *, watched: bool = False):
        arr = np.asarray(value, dtype=np.float64)
        if not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        self.value = arr
        self.tape: Tape | None = None
        self.node: int | None = None
        self.watched = watched

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def item(self) -> float:
        return float(self.value)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def __repr__(self) -> str:
        tag = "watched" if self.watched else ("node=%s" % self.node if self.node is not None else "const")
        return f"Tensor(shape={self.value.shape}, {tag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return neg(self)


def leaf(value) -> Tensor:
    """A trainable leaf: the tape assigns it a node on first use."""
    return Tensor(value, watched=True)


def constant(value) -> Tensor:
    """A tensor the tape will never differentiate through."""
    return Tensor(value)


class Tape:
    """Ordered record of executed ops; supports one reverse pass."""

    def __init__(self):
        self._parents: list[tuple[tuple[int, Callable[[np.ndarray], np.ndarray]], ...]] = []
        self._leaves: dict[Tensor, int] = {}
        self._spent = False

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        popped = _stack().pop()
        if popped is not self:
            raise TapeError("tape stack corrupted: exited a tape that was not innermost")

    def __len__(self) -> int:
        return len(self._parents)

    def _node_of(self, t: Tensor) -> int | None:
        """Node id of ``t`` on this tape, creating a leaf node if watched."""
        if t.tape is self:
            return t.node
        if t.watched:
            node = self._leaves.get(t)
            if node is None:
                node = len(self._parents)
                self._parents.append(())
                self._leaves[t] = node
            return node
        return None

    def _record(self, value: np.ndarray, parents) -> Tensor:
        out = Tensor(value)
        out.tape = self
        out.node = len(self._parents)
        self._parents.append(tuple(parents))
        return out

    def gradient(self, loss: Tensor, sources: Iterable[Tensor]) -> list[np.ndarray]:
        """Adjoints of a scalar ``loss`` with respect to ``sources``.

        A second call raises; build a fresh tape per backward pass.  Sources
        the loss never touched get zero gradients.
        """
        if self._spent:
            raise TapeError("tape already consumed by a backward pass; build a new tape")
        if loss.tape is not self or loss.node is None:
            raise TapeError("loss tensor is not attached to this tape")
        if loss.value.shape != ():
            raise TapeError(f"loss must be a scalar, got shape {loss.value.shape}")
        self._spent = True
        adj: list[np.ndarray | None] = [None] * len(self._parents)
        adj[loss.node] = np.ones((), dtype=np.float64)
        for i in range(loss.node, -1, -1):
            g = adj[i]
            if g is None:
                continue
            for parent, vjp in self._parents[i]:
                contrib = vjp(g)
                prev = adj[parent]
                # never accumulate in place: vjp results may alias the adjoint
                adj[parent] = contrib if prev is None else prev + contrib
        out = []
        for s in sources:
            node = self._leaves.get(s, s.node if s.tape is self else None)
            g = adj[node] if node is not None else None
            if g is None:
                g = np.zeros_like(s.value)
            g = np.asarray(g, dtype=np.float64)
            if g.ndim > 0 and not g.flags.c_contiguous:
                g = np.ascontiguousarray(g)
            out.append(g)
        return out


def _wrap(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if isinstance(x, numbers.Real):
        return Tensor(float(x))
    if isinstance(x, np.ndarray):
        return Tensor(x)
    raise TypeError(f"cannot use {type(x).__name__} as a tensor operand")


def _emit(value: np.ndarray, parents: Sequence[tuple[Tensor, Callable]]) -> Tensor:
    """Record an op output if any parent participates in the active tape."""
    if _STRICT_FINITE and not np.all(np.isfinite(value)):
        raise FloatingPointError("op produced a non-finite value")
    tape = _active_tape()
    if tape is not None:
        links = []
        for t, vjp in parents:
            node = tape._node_of(t)
            if node is not None:
                links.append((node, vjp))
        if links:
            return tape._record(value, links)
    return Tensor(value)


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.value.shape != b.value.shape:
        raise ShapeError(f"{op}: shapes {a.value.shape} and {b.value.shape} differ")


def _is_scalar(t: Tensor) -> bool:
    return t.value.ndim == 0


def _reduce_to_scalar(g: np.ndarray) -> np.ndarray:
    return np.asarray(g.sum(), dtype=np.float64)


# ---------------------------------------------------------------------------
# elementwise arithmetic (same shape, or scalar with tensor)


def add(a, b):
    if _either_dual(a, b):
        da, db = _as_dual(a), _as_dual(b)
        return Dual(add(da.p, db.p), _tan_sum(da.t, db.t))
    a, b = _wrap(a), _wrap(b)
    if not (_is_scalar(a) or _is_scalar(b)):
        _same_shape(a, b, "add")
    ga = (lambda g: _reduce_to_scalar(g)) if _is_scalar(a) and not _is_scalar(b) else (lambda g: g)
    gb = (lambda g: _reduce_to_scalar(g)) if _is_scalar(b) and not _is_scalar(a) else (lambda g: g)
    return _emit(a.value + b.value, [(a, ga), (b, gb)])


def sub(a, b):
    if _either_dual(a, b):
        da, db = _as_dual(a), _as_dual(b)
        tan = db.t if da.t is None else (da.t if db.t is None else sub(da.t, db.t))
        if tan is db.t and tan is not None:
            tan = neg(tan)
        return Dual(sub(da.p, db.p), tan)
    a, b = _wrap(a), _wrap(b)
    if not (_is_scalar(a) or _is_scalar(b)):
        _same_shape(a, b, "sub")
    ga = (lambda g: _reduce_to_scalar(g)) if _is_scalar(a) and not _is_scalar(b) else (lambda g: g)
    gb = (lambda g: _reduce_to_scalar(-g)) if _is_scalar(b) and not _is_scalar(a) else (lambda g: -g)
    return _emit(a.value - b.value, [(a, ga), (b, gb)])


def mul(a, b):
    if _either_dual(a, b):
        da, db = _as_dual(a), _as_dual(b)
        terms = []
        if da.t is not None:
            terms.append(mul(da.t, db.p))
        if db.t is not None:
            terms.append(mul(da.p, db.t))
        return Dual(mul(da.p, db.p), _tan_chain(terms))
    a, b = _wrap(a), _wrap(b)
    if not (_is_scalar(a) or _is_scalar(b)):
        _same_shape(a, b, "mul")
    av, bv = a.value, b.value

    def ga(g):
        out = g * bv
        return _reduce_to_scalar(out) if av.shape == () and bv.shape != () else out

    def gb(g):
        out = g * av
        return _reduce_to_scalar(out) if bv.shape == () and av.shape != () else out

    return _emit(av * bv, [(a, ga), (b, gb)])


def div(a, b):
    if _either_dual(a, b):
        da, db = _as_dual(a), _as_dual(b)
        out_p = div(da.p, db.p)
        terms = []
        if da.t is not None:
            terms.append(div(da.t, db.p))
        if db.t is not None:
            terms.append(neg(div(mul(out_p, db.t), db.p)))
        return Dual(out_p, _tan_chain(terms))
    a, b = _wrap(a), _wrap(b)
    if not (_is_scalar(a) or _is_scalar(b)):
        _same_shape(a, b, "div")
    if np.any(b.value == 0.0):
        raise ZeroDivisionError("div: divisor contains an exact zero")
    av, bv = a.value, b.value
    out = av / bv

    def ga(g):
        r = g / bv
        return _reduce_to_scalar(r) if av.shape == () and bv.shape != () else r

    def gb(g):
        r = -g * out / bv
        return _reduce_to_scalar(r) if bv.shape == () and av.shape != () else r

    return _emit(out, [(a, ga), (b, gb)])


def neg(a):
    if isinstance(a, Dual):
        return Dual(neg(a.p), None if a.t is None else neg(a.t))
    a = _wrap(a)
    return _emit(-a.value, [(a, lambda g: -g)])


# ---------------------------------------------------------------------------
# matrix product


def matmul(a, b):
    if _either_dual(a, b):
        da, db = _as_dual(a), _as_dual(b)
        terms = []
        if da.t is not None:
            terms.append(matmul(da.t, db.p))
        if db.t is not None:
            terms.append(matmul(da.p, db.t))
        return Dual(matmul(da.p, db.p), _tan_chain(terms))
    a, b = _wrap(a), _wrap(b)
    av, bv = a.value, b.value
    if av.ndim == 0 or bv.ndim == 0:
        raise ShapeError("matmul: operands must be 1-D or 2-D, got a scalar")
    if av.ndim > 2 or bv.ndim > 2:
        raise ShapeError(f"matmul: operands must be 1-D or 2-D, got {av.shape} and {bv.shape}")
    if av.shape[-1] != bv.shape[0]:
        raise ShapeError(f"matmul: inner dimensions differ, {av.shape} vs {bv.shape}")
    if av.ndim == 2 and bv.ndim == 2:
        ga = lambda g: g @ bv.T
        gb = lambda g: av.T @ g
    elif av.ndim == 2 and bv.ndim == 1:
        ga = lambda g: np.outer(g, bv)
        gb = lambda g: av.T @ g
    elif av.ndim == 1 and bv.ndim == 2:
        ga = lambda g: bv @ g
        gb = lambda g: np.outer(av, g)
    else:  # 1-D dot 1-D -> scalar
        ga = lambda g: g * bv
        gb = lambda g: g * av
    return _emit(av @ bv, [(a, ga), (b, gb)])


# ---------------------------------------------------------------------------
# nonlinearities


def sigmoid(a):
    if isinstance(a, Dual):
        out_p = sigmoid(a.p)
        tan = None
        if a.t is not None:
            tan = mul(mul(out_p, sub(1.0, out_p)), a.t)
        return Dual(out_p, tan)
    a = _wrap(a)
    # tanh form is overflow-free for large |x|
    out = 0.5 * (np.tanh(0.5 * a.value) + 1.0)
    return _emit(out, [(a, lambda g: g * (out * (1.0 - out)))])


def tanh(a):
    if isinstance(a, Dual):
        out_p = tanh(a.p)
        tan = None
        if a.t is not None:
            tan = mul(sub(1.0, square(out_p)), a.t)
        return Dual(out_p, tan)
    a = _wrap(a)
    out = np.tanh(a.value)
    return _emit(out, [(a, lambda g: g * (1.0 - out * out))])


def softmax_rows(a):
    """Row-wise softmax of a 2-D tensor, with max subtraction for stability."""
    if isinstance(a, Dual):
        out_p = softmax_rows(a.p)
        tan = None
        if a.t is not None:
            prod = mul(out_p, a.t)
            # row-replicate the inner product via an outer product with ones
            n = out_p.value.shape[1]
            rep = matmul(sum_rows(prod), constant(np.ones((1, n))))
            tan = sub(prod, mul(out_p, rep))
        return Dual(out_p, tan)
    a = _wrap(a)
    if a.value.ndim != 2:
        raise ShapeError(f"softmax_rows: expected 2-D input, got shape {a.value.shape}")
    shifted = a.value - a.value.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=1, keepdims=True)

    def ga(g):
        inner = (g * out).sum(axis=1, keepdims=True)
        return out * (g - inner)

    return _emit(out, [(a, ga)])


# ---------------------------------------------------------------------------
# structural ops


def concat(a, b, axis: int = 0):
    if _either_dual(a, b):
        da, db = _as_dual(a), _as_dual(b)
        ta = _tan_or_zeros(da)
        tb = _tan_or_zeros(db)
        tan = None if (da.t is None and db.t is None) else concat(ta, tb, axis)
        return Dual(concat(da.p, db.p, axis), tan)
    a, b = _wrap(a), _wrap(b)
    av, bv = a.value, b.value
    if av.ndim != bv.ndim:
        raise ShapeError(f"concat: ranks differ, {av.shape} vs {bv.shape}")
    if axis < 0 or axis >= av.ndim:
        raise ShapeError(f"concat: axis {axis} out of range for rank {av.ndim}")
    for d in range(av.ndim):
        if d != axis and av.shape[d] != bv.shape[d]:
            raise ShapeError(f"concat: shapes {av.shape} and {bv.shape} differ off axis {axis}")
    k = av.shape[axis]

    def ga(g):
        return g[:k] if axis == 0 else g[:, :k]

    def gb(g):
        return g[k:] if axis == 0 else g[:, k:]

    return _emit(np.concatenate([av, bv], axis=axis), [(a, ga), (b, gb)])


def stack_rows(tensors: Sequence):
    """Concatenate k same-shape 2-D tensors along rows: [k*B x C], block j first."""
    ts = list(tensors)
    if not ts:
        raise ShapeError("stack_rows: need at least one tensor")
    if any(isinstance(t, Dual) for t in ts):
        duals = [_as_dual(t) for t in ts]
        prim = stack_rows([d.p for d in duals])
        tan = None
        if any(d.t is not None for d in duals):
            tan = stack_rows([_tan_or_zeros(d) for d in duals])
        return Dual(prim, tan)
    ts = [_wrap(t) for t in ts]
    shape = ts[0].value.shape
    if len(shape) != 2:
        raise ShapeError(f"stack_rows: expected 2-D blocks, got shape {shape}")
    for t in ts:
        if t.value.shape != shape:
            raise ShapeError(f"stack_rows: block shapes differ, {shape} vs {t.value.shape}")
    rows = shape[0]
    parents = []
    for idx, t in enumerate(ts):
        lo = idx * rows
        parents.append((t, (lambda lo: lambda g: g[lo:lo + rows])(lo)))
    return _emit(np.concatenate([t.value for t in ts], axis=0), parents)


def narrow(a, axis: int, start: int, length: int):
    """Contiguous slice of ``length`` entries along ``axis``."""
    if isinstance(a, Dual):
        tan = None if a.t is None else narrow(a.t, axis, start, length)
        return Dual(narrow(a.p, axis, start, length), tan)
    a = _wrap(a)
    av = a.value
    if axis < 0 or axis >= av.ndim:
        raise ShapeError(f"narrow: axis {axis} out of range for rank {av.ndim}")
    if start < 0 or length < 0 or start + length > av.shape[axis]:
        raise ShapeError(f"narrow: window [{start}, {start + length}) exceeds extent {av.shape[axis]}")
    index = tuple(slice(None) if d != axis else slice(start, start + length) for d in range(av.ndim))

    def ga(g):
        full = np.zeros_like(av)
        full[index] = g
        return full

    return _emit(av[index].copy(), [(a, ga)])


def reshape(a, shape):
    if isinstance(a, Dual):
        tan = None if a.t is None else reshape(a.t, shape)
        return Dual(reshape(a.p, shape), tan)
    a = _wrap(a)
    old = a.value.shape
    try:
        out = a.value.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot view shape {old} as {tuple(shape)}") from exc
    return _emit(out, [(a, lambda g: g.reshape(old))])


def transpose(a):
    if isinstance(a, Dual):
        return Dual(transpose(a.p), None if a.t is None else transpose(a.t))
    a = _wrap(a)
    if a.value.ndim != 2:
        raise ShapeError(f"transpose: expected 2-D input, got shape {a.value.shape}")
    return _emit(np.ascontiguousarray(a.value.T), [(a, lambda g: g.T)])


def add_bias(a, b):
    """Add a length-n vector to every row of an [m x n] matrix."""
    if _either_dual(a, b):
        da, db = _as_dual(a), _as_dual(b)
        prim = add_bias(da.p, db.p)
        if da.t is None and db.t is None:
            tan = None
        elif db.t is None:
            tan = da.t
        else:
            tan = add_bias(_tan_or_zeros(da), db.t)
        return Dual(prim, tan)
    a, b = _wrap(a), _wrap(b)
    if a.value.ndim != 2 or b.value.ndim != 1 or a.value.shape[1] != b.value.shape[0]:
        raise ShapeError(f"add_bias: expected [m x n] + [n], got {a.value.shape} and {b.value.shape}")
    return _emit(a.value + b.value[None, :], [(a, lambda g: g), (b, lambda g: g.sum(axis=0))])


def tile_rows(a, reps: int):
    """Repeat a 2-D block ``reps`` times along rows: [B x C] -> [reps*B x C]."""
    if isinstance(a, Dual):
        tan = None if a.t is None else tile_rows(a.t, reps)
        return Dual(tile_rows(a.p, reps), tan)
    a = _wrap(a)
    if a.value.ndim != 2:
        raise ShapeError(f"tile_rows: expected 2-D input, got shape {a.value.shape}")
    if reps < 1:
        raise ShapeError(f"tile_rows: reps must be positive, got {reps}")
    rows, cols = a.value.shape
    return _emit(
        np.tile(a.value, (reps, 1)),
        [(a, lambda g: g.reshape(reps, rows, cols).sum(axis=0))],
    )


def sum_rows(a):
    """Row sums of a 2-D tensor, kept as a column: [m x n] -> [m x 1]."""
    if isinstance(a, Dual):
        tan = None if a.t is None else sum_rows(a.t)
        return Dual(sum_rows(a.p), tan)
    a = _wrap(a)
    if a.value.ndim != 2:
        raise ShapeError(f"sum_rows: expected 2-D input, got shape {a.value.shape}")
    shape = a.value.shape
    return _emit(a.value.sum(axis=1, keepdims=True), [(a, lambda g: np.broadcast_to(g, shape))])


# ---------------------------------------------------------------------------
# reductions


def sum_all(a):
    if isinstance(a, Dual):
        tan = None if a.t is None else sum_all(a.t)
        return Dual(sum_all(a.p), tan)
    a = _wrap(a)
    shape = a.value.shape
    return _emit(np.asarray(a.value.sum()), [(a, lambda g: np.broadcast_to(g, shape))])


def mean_all(a):
    if isinstance(a, Dual):
        tan = None if a.t is None else mean_all(a.t)
        return Dual(mean_all(a.p), tan)
    a = _wrap(a)
    shape = a.value.shape
    n = a.value.size
    return _emit(np.asarray(a.value.mean()), [(a, lambda g: np.broadcast_to(g / n, shape))])


def square(a):
    if isinstance(a, Dual):
        out_p = square(a.p)
        tan = None if a.t is None else mul(mul(2.0, a.p), a.t)
        return Dual(out_p, tan)
    a = _wrap(a)
    av = a.value
    return _emit(av * av, [(a, lambda g: g * (2.0 * av))])


def frobenius_sq(a):
    """Sum of squared entries, as a scalar."""
    if isinstance(a, Dual):
        out_p = frobenius_sq(a.p)
        tan = None if a.t is None else mul(2.0, sum_all(mul(a.p, a.t)))
        return Dual(out_p, tan)
    a = _wrap(a)
    av = a.value
    return _emit(np.asarray(np.sum(av * av)), [(a, lambda g: g * (2.0 * av))])


# ---------------------------------------------------------------------------
# fused attention kernels
#
# Both kernels take the encoder states stacked block-major: row j*B + b of
# ``ystack`` is encoder step j for batch sample b.  Fusing keeps the large
# [n*B x A] intermediates off the tape; backward recomputes the tanh.


def additive_scores(q, yk, v):
    """Additive attention scores: e[b, j] = sum_a v[a] * tanh(q[b, a] + yk[j*B+b, a]).

    ``q`` is [B x A], ``yk`` is [n*B x A] (keys with bias folded in), ``v`` is [A].
    Returns [B x n].  Under forward-mode duals this falls back to the unfused
    composition so the tangent stays on the tape.
    """
    if _either_dual(q, yk) or isinstance(v, Dual):
        return _additive_scores_dual(q, yk, v)
    q, yk, v = _wrap(q), _wrap(yk), _wrap(v)
    qv, ykv, vv = q.value, yk.value, v.value
    if qv.ndim != 2 or ykv.ndim != 2 or vv.ndim != 1:
        raise ShapeError(
            f"additive_scores: expected [B x A], [n*B x A], [A]; got {qv.shape}, {ykv.shape}, {vv.shape}"
        )
    b_rows, a_dim = qv.shape
    if ykv.shape[1] != a_dim or vv.shape[0] != a_dim:
        raise ShapeError(f"additive_scores: width mismatch, {qv.shape}, {ykv.shape}, {vv.shape}")
    if b_rows == 0 or ykv.shape[0] % b_rows != 0:
        raise ShapeError(f"additive_scores: {ykv.shape[0]} key rows not a multiple of batch {b_rows}")
    n = ykv.shape[0] // b_rows
    t3 = np.tanh(ykv.reshape(n, b_rows, a_dim) + qv[None, :, :])
    out = np.ascontiguousarray((t3 @ vv).T)
    # the [n x B x A] tanh block is recomputed once per backward and shared
    # between the three vjps instead of being retained on the tape
    cache: dict = {}

    def _t3():
        if "t3" not in cache:
            cache["t3"] = np.tanh(ykv.reshape(n, b_rows, a_dim) + qv[None, :, :])
        return cache["t3"]

    def _gpre(g):
        key = id(g)
        if cache.get("gkey") != key:
            t3r = _t3()
            cache["gpre"] = (1.0 - t3r * t3r) * (g.T[:, :, None] * vv[None, None, :])
            cache["gkey"] = key
        return cache["gpre"]

    def gq(g):
        return _gpre(g).sum(axis=0)

    def gyk(g):
        return _gpre(g).reshape(n * b_rows, a_dim)

    def gv(g):
        return np.einsum("jba,bj->a", _t3(), g)

    return _emit(out, [(q, gq), (yk, gyk), (v, gv)])


def attn_context(alpha, ystack):
    """Per-sample convex mix of encoder states: c[b] = sum_j alpha[b, j] * ystack[j*B+b].

    ``alpha`` is [B x n], ``ystack`` is [n*B x H]; returns [B x H].
    """
    if _either_dual(alpha, ystack):
        da, dy = _as_dual(alpha), _as_dual(ystack)
        terms = []
        if da.t is not None:
            terms.append(attn_context(da.t, dy.p))
        if dy.t is not None:
            terms.append(attn_context(da.p, dy.t))
        return Dual(attn_context(da.p, dy.p), _tan_chain(terms))
    alpha, ystack = _wrap(alpha), _wrap(ystack)
    av, yv = alpha.value, ystack.value
    if av.ndim != 2 or yv.ndim != 2:
        raise ShapeError(f"attn_context: expected 2-D inputs, got {av.shape} and {yv.shape}")
    b_rows, n = av.shape
    if b_rows == 0 or yv.shape[0] != n * b_rows:
        raise ShapeError(f"attn_context: key rows {yv.shape[0]} incompatible with alpha {av.shape}")
    h = yv.shape[1]
    y3 = yv.reshape(n, b_rows, h)
    out = np.einsum("bn,nbh->bh", av, y3)

    def galpha(g):
        return np.einsum("bh,nbh->bn", g, y3)

    def gystack(g):
        return (av.T[:, :, None] * g[None, :, :]).reshape(n * b_rows, h)

    return _emit(out, [(alpha, galpha), (ystack, gystack)])


# ---------------------------------------------------------------------------
# forward-mode duals


class Dual:
    """Primal/tangent pair for one directional derivative.

    ``t is None`` means the tangent is identically zero (constants, weights).
    Tangents are ordinary taped tensors, so reverse mode can differentiate
    straight through them.
    """

    __slots__ = ("p", "t")

    def __init__(self, primal: Tensor, tangent: Tensor | None = None):
        self.p = primal
        self.t = tangent

    @property
    def value(self) -> np.ndarray:
        return self.p.value

    @property
    def shape(self) -> tuple[int, ...]:
        return self.p.value.shape

    @property
    def T(self) -> "Dual":
        return transpose(self)

    def __repr__(self) -> str:
        return f"Dual(shape={self.p.value.shape}, tangent={'0' if self.t is None else 'set'})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return neg(self)


def _either_dual(a, b) -> bool:
    return isinstance(a, Dual) or isinstance(b, Dual)


def _as_dual(x) -> Dual:
    if isinstance(x, Dual):
        return x
    return Dual(_wrap(x), None)


def _tan_or_zeros(d: Dual) -> Tensor:
    return d.t if d.t is not None else constant(np.zeros_like(d.p.value))


def _tan_sum(ta: Tensor | None, tb: Tensor | None) -> Tensor | None:
    if ta is None:
        return tb
    if tb is None:
        return ta
    return add(ta, tb)


def _tan_chain(terms: list) -> Tensor | None:
    out = None
    for t in terms:
        out = t if out is None else add(out, t)
    return out


def _additive_scores_dual(q, yk, v) -> Dual:
    """Unfused additive scores for dual inputs; tangent stays on the tape."""
    dq, dyk = _as_dual(q), _as_dual(yk)
    dv = _as_dual(v)
    b_rows = dq.p.value.shape[0]
    reps = dyk.p.value.shape[0] // b_rows
    pre = tanh(add(tile_rows(dq, reps), dyk))
    v_col = reshape(dv, (dv.p.value.shape[0], 1)) if dv.t is not None else reshape(dv.p, (dv.p.value.shape[0], 1))
    flat = matmul(pre, v_col)  # [n*B x 1]
    return transpose(reshape(flat, (reps, b_rows)))
