"""Tape-based reverse-mode automatic differentiation over float64 numpy arrays.

A :class:`Tape` records every primitive evaluation in order. Leaves are
created with :meth:`Tape.leaf` (trainable) or :meth:`Tape.constant` (data,
random draws, masks). ``Tape.backward(loss)`` walks the tape in reverse and
fills ``grad`` on every leaf that requires it.

Broadcasting is deliberately narrow. Binary elementwise primitives accept
operands of equal shape, or a smaller operand whose shape is a trailing
suffix (``align="right"``, bias style) or a leading prefix
(``align="left"``, per-row scaling) of the larger one.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable, Sequence

import numpy as np


class GradError(ValueError):
    """Base class for tape errors."""


class ShapeError(GradError):
    def __init__(self, op: str, *shapes: tuple):
        self.op = op
        self.shapes = shapes
        super().__init__(f"{op}: incompatible shapes {' vs '.join(str(s) for s in shapes)}")


class DomainError(GradError):
    def __init__(self, op: str, detail: str):
        self.op = op
        super().__init__(f"{op}: {detail}")


class Tensor:
    """A float64 value with an optional gradient slot."""

    __slots__ = ("value", "grad", "requires_grad", "name")

    def __init__(self, value, requires_grad: bool = False, name: str | None = None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.value.shape

    @property
    def size(self) -> int:
        return self.value.size

    def __repr__(self) -> str:
        label = f" {self.name}" if self.name else ""
        return f"Tensor{label}(shape={self.shape})"


@dataclass
class Node:
    op: str
    inputs: tuple
    attrs: dict
    out: Tensor
    saved: Any = None


@dataclass(frozen=True)
class Primitive:
    forward: Callable  # (values, attrs) -> (out, saved)
    backward: Callable  # (g, values, out, saved, attrs) -> tuple of input grads
    check: Callable | None = None  # (shapes, attrs) -> None, raises ShapeError


PRIMITIVES: dict[str, Primitive] = {}


def primitive(name: str, check: Callable | None = None):
    def register(cls):
        PRIMITIVES[name] = Primitive(cls.forward, cls.backward, check)
        return cls

    return register


# --------------------------------------------------------------------- shapes

def _align_kind(op: str, a: tuple, b: tuple, align: str) -> str:
    if a == b:
        return "same"
    big, small = (a, b) if len(a) >= len(b) else (b, a)
    if align == "right" and big[len(big) - len(small):] == small:
        return "right"
    if align == "left" and big[: len(small)] == small:
        return "left"
    raise ShapeError(op, a, b)


def _expand(small: np.ndarray, ndim: int, kind: str) -> np.ndarray:
    if kind == "left":
        return small.reshape(small.shape + (1,) * (ndim - small.ndim))
    return small


def _reduce_to(g: np.ndarray, shape: tuple, kind: str) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if kind == "left":
        return g.sum(axis=tuple(range(len(shape), g.ndim)))
    return g.sum(axis=tuple(range(extra)))


def _binary_check(op):
    def check(shapes, attrs):
        _align_kind(op, shapes[0], shapes[1], attrs.get("align", "right"))

    return check


def _binary_operands(values, attrs):
    a, b = values
    kind = "same" if a.shape == b.shape else _align_kind("binary", a.shape, b.shape, attrs.get("align", "right"))
    ndim = max(a.ndim, b.ndim)
    if a.ndim < ndim:
        a = _expand(a, ndim, kind)
    if b.ndim < ndim:
        b = _expand(b, ndim, kind)
    return a, b, kind


# ----------------------------------------------------------------- primitives

@primitive("add", _binary_check("add"))
class _Add:
    @staticmethod
    def forward(values, attrs):
        a, b, kind = _binary_operands(values, attrs)
        return a + b, kind

    @staticmethod
    def backward(g, values, out, kind, attrs):
        return _reduce_to(g, values[0].shape, kind), _reduce_to(g, values[1].shape, kind)


@primitive("sub", _binary_check("sub"))
class _Sub:
    @staticmethod
    def forward(values, attrs):
        a, b, kind = _binary_operands(values, attrs)
        return a - b, kind

    @staticmethod
    def backward(g, values, out, kind, attrs):
        return _reduce_to(g, values[0].shape, kind), -_reduce_to(g, values[1].shape, kind)


@primitive("mul", _binary_check("mul"))
class _Mul:
    @staticmethod
    def forward(values, attrs):
        a, b, kind = _binary_operands(values, attrs)
        return a * b, (a, b, kind)

    @staticmethod
    def backward(g, values, out, saved, attrs):
        a, b, kind = saved
        return _reduce_to(g * b, values[0].shape, kind), _reduce_to(g * a, values[1].shape, kind)


@primitive("scale")
class _Scale:
    @staticmethod
    def forward(values, attrs):
        return attrs["c"] * values[0], None

    @staticmethod
    def backward(g, values, out, saved, attrs):
        return (attrs["c"] * g,)


def _check_matmul(shapes, attrs):
    a, b = shapes
    if len(a) < 1 or len(b) != 2 or a[-1] != b[0]:
        raise ShapeError("matmul", a, b)


@primitive("matmul", _check_matmul)
class _Matmul:
    """``a (..., k) @ b (k, m) -> (..., m)``."""

    @staticmethod
    def forward(values, attrs):
        a, b = values
        return a @ b, None

    @staticmethod
    def backward(g, values, out, saved, attrs):
        a, b = values
        k, m = b.shape
        ga = g @ b.T
        gb = a.reshape(-1, k).T @ g.reshape(-1, m)
        return ga, gb


def _check_matvec(shapes, attrs):
    A, x = shapes
    if len(A) != 3 or len(x) < 2 or A[0] != x[0] or A[2] != x[-1]:
        raise ShapeError("matvec", A, x)


@primitive("matvec", _check_matvec)
class _Matvec:
    """Per-row matrices: ``A (B, m, k)`` applied to ``x (B, ..., k)``."""

    @staticmethod
    def forward(values, attrs):
        A, x = values
        return np.einsum("bmk,b...k->b...m", A, x), None

    @staticmethod
    def backward(g, values, out, saved, attrs):
        A, x = values
        B = A.shape[0]
        gA = np.einsum("bnm,bnk->bmk", g.reshape(B, -1, A.shape[1]), x.reshape(B, -1, A.shape[2]))
        gx = np.einsum("bmk,b...m->b...k", A, g)
        return gA, gx


def _check_transpose(shapes, attrs):
    if len(shapes[0]) != 2:
        raise ShapeError("transpose", shapes[0])


@primitive("transpose", _check_transpose)
class _Transpose:
    @staticmethod
    def forward(values, attrs):
        return values[0].T.copy(), None

    @staticmethod
    def backward(g, values, out, saved, attrs):
        return (g.T,)


def _check_concat(shapes, attrs):
    axis = attrs["axis"]
    ref = list(shapes[0])
    for s in shapes[1:]:
        other = list(s)
        if len(other) != len(ref):
            raise ShapeError("concat", *shapes)
        if any(x != y for i, (x, y) in enumerate(zip(ref, other)) if i != axis % len(ref)):
            raise ShapeError("concat", *shapes)


@primitive("concat", _check_concat)
class _Concat:
    @staticmethod
    def forward(values, attrs):
        return np.concatenate(values, axis=attrs["axis"]), None

    @staticmethod
    def backward(g, values, out, saved, attrs):
        axis = attrs["axis"]
        bounds = np.cumsum([v.shape[axis] for v in values])[:-1]
        return tuple(np.split(g, bounds, axis=axis))


def _check_stack(shapes, attrs):
    if any(s != shapes[0] for s in shapes):
        raise ShapeError("stack", *shapes)


@primitive("stack", _check_stack)
class _Stack:
    @staticmethod
    def forward(values, attrs):
        return np.stack(values, axis=attrs["axis"]), None

    @staticmethod
    def backward(g, values, out, saved, attrs):
        axis = attrs["axis"]
        return tuple(np.moveaxis(g, axis, 0))


@primitive("slice")
class _Slice:
    """Basic (non-fancy) numpy indexing; ``key`` is a tuple of ints/slices."""

    @staticmethod
    def forward(values, attrs):
        return values[0][attrs["key"]].copy(), None

    @staticmethod
    def backward(g, values, out, saved, attrs):
        ga = np.zeros_like(values[0])
        ga[attrs["key"]] += g
        return (ga,)


@primitive("sum")
class _Sum:
    @staticmethod
    def forward(values, attrs):
        return np.sum(values[0], axis=attrs.get("axis")), None

    @staticmethod
    def backward(g, values, out, saved, attrs):
        a = values[0]
        axis = attrs.get("axis")
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)


@primitive("mean")
class _Mean:
    @staticmethod
    def forward(values, attrs):
        return np.mean(values[0], axis=attrs.get("axis")), None

    @staticmethod
    def backward(g, values, out, saved, attrs):
        a = values[0]
        axis = attrs.get("axis")
        n = a.size if axis is None else a.shape[axis]
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, a.shape).copy(),)


@primitive("exp")
class _Exp:
    @staticmethod
    def forward(values, attrs):
        return np.exp(values[0]), None

    @staticmethod
    def backward(g, values, out, saved, attrs):
        return (g * out,)


@primitive("log")
class _Log:
    @staticmethod
    def forward(values, attrs):
        a = values[0]
        if np.any(a <= 0):
            raise DomainError("log", f"non-positive input (min {a.min()!r})")
        return np.log(a), None

    @staticmethod
    def backward(g, values, out, saved, attrs):
        return (g / values[0],)


def _sigmoid(a: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(a)
    pos = a >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
    ea = np.exp(a[~pos])
    out[~pos] = ea / (1.0 + ea)
    return out


@primitive("sigmoid")
class _Sigmoid:
    @staticmethod
    def forward(values, attrs):
        return _sigmoid(values[0]), None

    @staticmethod
    def backward(g, values, out, saved, attrs):
        return (g * out * (1.0 - out),)


@primitive("tanh")
class _Tanh:
    @staticmethod
    def forward(values, attrs):
        return np.tanh(values[0]), None

    @staticmethod
    def backward(g, values, out, saved, attrs):
        return (g * (1.0 - out * out),)


def softmax(a: np.ndarray) -> np.ndarray:
    """Softmax along the last axis with max subtraction."""
    with np.errstate(over="ignore"):  # a gap beyond float range just underflows to 0
        e = np.exp(a - a.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


@primitive("softmax")
class _Softmax:
    @staticmethod
    def forward(values, attrs):
        return softmax(values[0]), None

    @staticmethod
    def backward(g, values, out, saved, attrs):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)


@primitive("sqnorm")
class _SqNorm:
    @staticmethod
    def forward(values, attrs):
        a = values[0]
        return np.asarray(np.dot(a.ravel(), a.ravel())), None

    @staticmethod
    def backward(g, values, out, saved, attrs):
        return (2.0 * g * values[0],)


@primitive("clip")
class _Clip:
    """Clamp to ``[lo, hi]``; zero gradient where the clamp is active."""

    @staticmethod
    def forward(values, attrs):
        return np.clip(values[0], attrs["lo"], attrs["hi"]), None

    @staticmethod
    def backward(g, values, out, saved, attrs):
        a = values[0]
        inside = (a >= attrs["lo"]) & (a <= attrs["hi"])
        return (g * inside,)


# ----------------------------------------------------------------------- tape

@dataclass
class Tape:
    """Define-by-run record of primitive evaluations."""

    nodes: list[Node] = field(default_factory=list)
    leaves: list[Tensor] = field(default_factory=list)

    def leaf(self, value, name: str | None = None) -> Tensor:
        t = Tensor(value, requires_grad=True, name=name)
        self.leaves.append(t)
        return t

    def constant(self, value, name: str | None = None) -> Tensor:
        return Tensor(value, requires_grad=False, name=name)

    def eval_primitive(self, op: str, *inputs: Tensor, **attrs) -> Tensor:
        try:
            prim = PRIMITIVES[op]
        except KeyError:
            raise GradError(f"unknown primitive {op!r}") from None
        if prim.check is not None:
            prim.check([t.shape for t in inputs], attrs)
        values = [t.value for t in inputs]
        try:
            out_value, saved = prim.forward(values, attrs)
        except ValueError as exc:
            if isinstance(exc, GradError):
                raise
            raise ShapeError(op, *(t.shape for t in inputs)) from exc
        out = Tensor(out_value, requires_grad=any(t.requires_grad for t in inputs))
        self.nodes.append(Node(op, tuple(inputs), attrs, out, saved))
        return out

    # convenience wrappers
    def add(self, a, b, align="right"):
        return self.eval_primitive("add", a, b, align=align)

    def sub(self, a, b, align="right"):
        return self.eval_primitive("sub", a, b, align=align)

    def mul(self, a, b, align="right"):
        return self.eval_primitive("mul", a, b, align=align)

    def scale(self, a, c: float):
        return self.eval_primitive("scale", a, c=float(c))

    def matmul(self, a, b):
        return self.eval_primitive("matmul", a, b)

    def matvec(self, A, x):
        return self.eval_primitive("matvec", A, x)

    def transpose(self, a):
        return self.eval_primitive("transpose", a)

    def concat(self, parts: Sequence[Tensor], axis: int = -1):
        return self.eval_primitive("concat", *parts, axis=axis)

    def stack(self, parts: Sequence[Tensor], axis: int = 0):
        return self.eval_primitive("stack", *parts, axis=axis)

    def slice(self, a, key):
        if not isinstance(key, tuple):
            key = (key,)
        return self.eval_primitive("slice", a, key=key)

    def sum(self, a, axis: int | None = None):
        return self.eval_primitive("sum", a, axis=axis)

    def mean(self, a, axis: int | None = None):
        return self.eval_primitive("mean", a, axis=axis)

    def exp(self, a):
        return self.eval_primitive("exp", a)

    def log(self, a):
        return self.eval_primitive("log", a)

    def sigmoid(self, a):
        return self.eval_primitive("sigmoid", a)

    def tanh(self, a):
        return self.eval_primitive("tanh", a)

    def softmax(self, a):
        return self.eval_primitive("softmax", a)

    def sqnorm(self, a):
        return self.eval_primitive("sqnorm", a)

    def clip(self, a, lo: float, hi: float):
        return self.eval_primitive("clip", a, lo=lo, hi=hi)

    def backward(self, loss: Tensor) -> None:
        """Populate ``grad`` on every leaf with d(loss)/d(leaf)."""
        if loss.size != 1:
            raise GradError(f"backward: loss must be scalar, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.value)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.out), None)
            if g is None or not node.out.requires_grad:
                continue
            prim = PRIMITIVES[node.op]
            in_grads = prim.backward(g, [t.value for t in node.inputs], node.out.value, node.saved, node.attrs)
            for t, gi in zip(node.inputs, in_grads):
                if not t.requires_grad or gi is None:
                    continue
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
        for leaf in self.leaves:
            g = grads.get(id(leaf))
            leaf.grad = np.zeros_like(leaf.value) if g is None else np.asarray(g).reshape(leaf.shape)

    def replay(self) -> list[np.ndarray]:
        """Recompute every node from its recorded inputs; returns the outputs."""
        recomputed: dict[int, np.ndarray] = {}
        outs = []
        for node in self.nodes:
            values = [recomputed.get(id(t), t.value) for t in node.inputs]
            out, _ = PRIMITIVES[node.op].forward(values, node.attrs)
            recomputed[id(node.out)] = out
            outs.append(out)
        return outs


def eval_primitive(op: str, *inputs, tape: Tape | None = None, **attrs) -> Tensor:
    """Evaluate one primitive on a (fresh, unless given) tape."""
    tape = tape if tape is not None else Tape()
    tensors = [t if isinstance(t, Tensor) else tape.constant(t) for t in inputs]
    return tape.eval_primitive(op, *tensors, **attrs)


def backward(tape: Tape, loss: Tensor) -> list[np.ndarray]:
    tape.backward(loss)
    return [leaf.grad for leaf in tape.leaves]


def grad_check(f: Callable[..., Tensor], leaves: Sequence, step: float = 1e-5) -> float:
    """Largest relative error between tape gradients and central differences.

    ``f(tape, *leaf_tensors)`` must build a scalar loss deterministically;
    any random draws must already be fixed inside ``f`` or among ``leaves``.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    base = [np.array(v, dtype=np.float64) for v in leaves]

    tape = Tape()
    ts = [tape.leaf(v.copy()) for v in base]
    loss = f(tape, *ts)
    tape.backward(loss)
    analytic = [t.grad for t in ts]

    def evaluate(vals):
        t = Tape()
        return float(f(t, *[t.leaf(v) for v in vals]).value)

    worst = 0.0
    for i, v in enumerate(base):
        for idx in np.ndindex(v.shape):
            vals = [b.copy() for b in base]
            vals[i][idx] = v[idx] + step
            up = evaluate(vals)
            vals[i][idx] = v[idx] - step
            down = evaluate(vals)
            numeric = (up - down) / (2.0 * step)
            a = analytic[i][idx]
            err = abs(a - numeric) / max(1e-8, abs(a) + abs(numeric))
            worst = max(worst, err)
    return worst
