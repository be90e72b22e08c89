"""Tape-based reverse-mode differentiation over dense float64 arrays.

Every primitive is polymorphic: called on plain numbers or numpy arrays it
returns a plain numpy result, called on a :class:`Tensor` inside an active
:class:`Tape` it also records a backward rule.  Geometry and loss code is
therefore written once and runs both as a numeric library and as a
differentiable model.

Usage::

    x = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        loss = ad.sum(ad.exp(x))
    tape.backward(loss)
    x.grad  # -> exp(1) * ones
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor", "Tape", "TapeError", "NonFiniteError", "NumericDomainError",
    "value", "is_tensor", "detach", "backward",
    "add", "sub", "neg", "mul", "div", "matmul", "concat", "getitem", "take",
    "segment_sum", "sum", "mean", "exp", "log", "sqrt", "abs", "pow",
    "cosh", "sinh", "arcosh", "arsinh", "cos", "sin", "arccos", "tanh",
    "softplus", "softmax", "logsumexp", "clamp", "sinhc", "sinc", "arsinhc",
    "atan2c", "diagonal", "reshape", "transpose",
]


class TapeError(RuntimeError):
    """Misuse of a tape (reuse after backward, non-scalar loss, ...)."""


class NonFiniteError(FloatingPointError):
    """The loss is not finite; ``op`` names the first primitive that produced a non-finite value."""

    def __init__(self, message: str, op: str | None = None, index: int | None = None):
        super().__init__(message)
        self.op = op
        self.index = index


class NumericDomainError(ValueError):
    """A primitive was evaluated outside its mathematical domain."""


_TAPES: list["Tape"] = []


class Tensor:
    """Dense float64 array with an optional gradient slot."""

    __array_priority__ = 1000

    def __init__(self, value, requires_grad: bool = False, name: str | None = None):
        self.value = np.array(value, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self._tape: Tape | None = None  # set on op outputs recorded on a tape

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    @property
    def T(self) -> "Tensor | np.ndarray":
        return transpose(self)

    def __len__(self) -> int:
        return len(self.value)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.value!r}{flag})"

    # operator sugar
    def __add__(self, o): return add(self, o)
    def __radd__(self, o): return add(o, self)
    def __sub__(self, o): return sub(self, o)
    def __rsub__(self, o): return sub(o, self)
    def __mul__(self, o): return mul(self, o)
    def __rmul__(self, o): return mul(o, self)
    def __truediv__(self, o): return div(self, o)
    def __rtruediv__(self, o): return div(o, self)
    def __matmul__(self, o): return matmul(self, o)
    def __rmatmul__(self, o): return matmul(o, self)
    def __neg__(self): return neg(self)
    def __pow__(self, p): return pow(self, p)
    def __getitem__(self, idx): return getitem(self, idx)


class _Node:
    __slots__ = ("op", "out", "parents", "backward")

    def __init__(self, op, out, parents, backward):
        self.op = op
        self.out = out
        self.parents = parents
        self.backward = backward


class Tape:
    """Ordered record of primitive applications.

    A tape is single use: after :meth:`backward` it refuses a second pass,
    the caller must re-run the forward computation on a fresh tape.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.used = False

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.remove(self)

    def _tracks(self, x) -> bool:
        return isinstance(x, Tensor) and (x.requires_grad or x._tape is self)

    def record(self, op: str, out: Tensor, parents: tuple, backward: Callable) -> None:
        if self.used:
            raise TapeError("tape already consumed by backward(); start a new tape")
        out._tape = self
        self.nodes.append(_Node(op, out, parents, backward))

    def first_non_finite(self) -> tuple[int, str] | None:
        for k, node in enumerate(self.nodes):
            if not np.all(np.isfinite(node.out.value)):
                return k, node.op
        return None

    def backward(self, loss: Tensor, wrt: Iterable[Tensor] | None = None) -> list[np.ndarray] | None:
        """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every tracked leaf.

        With ``wrt`` given, also returns the gradient of this loss alone for
        each listed leaf (zeros where the loss does not depend on it), whatever
        ``leaf.grad`` held before the call.
        """
        if self.used:
            raise TapeError("backward() called twice on the same tape")
        if not isinstance(loss, Tensor) or loss.value.size != 1:
            raise TapeError("loss must be a scalar Tensor")
        if not np.isfinite(loss.value).all():
            bad = self.first_non_finite()
            where = f" (first non-finite primitive: #{bad[0]} {bad[1]})" if bad else ""
            raise NonFiniteError("loss is not finite" + where,
                                 op=bad[1] if bad else None, index=bad[0] if bad else None)
        self.used = True
        grads: dict[int, np.ndarray] = {}
        fresh: dict[int, np.ndarray] = {}
        if loss.requires_grad and loss._tape is not self:
            _accumulate_leaf(loss, np.ones_like(loss.value), fresh)
        elif loss._tape is self:
            grads[id(loss)] = np.ones_like(loss.value)
        for node in reversed(self.nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            pgrads = node.backward(g)
            for p, pg in zip(node.parents, pgrads):
                if pg is None or not isinstance(p, Tensor):
                    continue
                if p._tape is self:
                    key = id(p)
                    if key in grads:
                        grads[key] = grads[key] + pg
                    else:
                        grads[key] = pg
                elif p.requires_grad:
                    _accumulate_leaf(p, pg, fresh)
        self.nodes = []
        if wrt is None:
            return None
        out = []
        for leaf in wrt:
            if leaf.grad is None:
                leaf.grad = np.zeros_like(leaf.value)
            out.append(fresh.get(id(leaf), np.zeros_like(leaf.value)))
        return out


def _accumulate_leaf(leaf: Tensor, g: np.ndarray, fresh: dict) -> None:
    g = np.asarray(g, dtype=np.float64).reshape(leaf.value.shape)
    leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g
    key = id(leaf)
    fresh[key] = g.copy() if key not in fresh else fresh[key] + g


def backward(loss: Tensor, wrt: Iterable[Tensor] | None = None):
    """Run the backward pass on the tape that produced ``loss``."""
    tape = loss._tape
    if tape is None:
        raise TapeError("loss was not recorded on any tape")
    return tape.backward(loss, wrt)


# ---------------------------------------------------------------- helpers

def is_tensor(x) -> bool:
    return isinstance(x, Tensor)


def value(x) -> np.ndarray:
    """Underlying numpy value of a Tensor, or the input as an array."""
    return x.value if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def detach(x):
    """Cut the gradient path; returns a plain numpy array."""
    return value(x).copy()


def _active_tape(args) -> Tape | None:
    if not _TAPES:
        return None
    tape = _TAPES[-1]
    for a in args:
        if tape._tracks(a):
            return tape
    return None


def _emit(op: str, out: np.ndarray, parents: tuple, backward: Callable):
    """Wrap a forward result; record on the active tape if any parent is tracked."""
    if not any(isinstance(p, Tensor) for p in parents):
        return out
    t = Tensor(out)
    tape = _active_tape(parents)
    if tape is not None:
        tape.record(op, t, parents, backward)
    return t


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g.reshape(shape)


def _shape(x) -> tuple[int, ...]:
    return np.shape(value(x))


# ---------------------------------------------------------------- arithmetic

def add(a, b):
    va, vb = value(a), value(b)
    try:
        out = va + vb
    except ValueError as e:
        raise ValueError(f"add: shape mismatch {va.shape} vs {vb.shape}") from e
    sa, sb = va.shape, vb.shape
    return _emit("add", out, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b):
    va, vb = value(a), value(b)
    try:
        out = va - vb
    except ValueError as e:
        raise ValueError(f"sub: shape mismatch {va.shape} vs {vb.shape}") from e
    sa, sb = va.shape, vb.shape
    return _emit("sub", out, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def neg(a):
    return _emit("neg", -value(a), (a,), lambda g: (-g,))


def mul(a, b):
    va, vb = value(a), value(b)
    try:
        out = va * vb
    except ValueError as e:
        raise ValueError(f"mul: shape mismatch {va.shape} vs {vb.shape}") from e
    return _emit("mul", out, (a, b),
                 lambda g: (_unbroadcast(g * vb, va.shape), _unbroadcast(g * va, vb.shape)))


def div(a, b):
    va, vb = value(a), value(b)
    if np.any(vb == 0):
        raise NumericDomainError("div: division by zero")
    out = va / vb
    return _emit("div", out, (a, b),
                 lambda g: (_unbroadcast(g / vb, va.shape), _unbroadcast(-g * out / vb, vb.shape)))


def matmul(a, b):
    va, vb = value(a), value(b)
    if va.ndim != 2 or vb.ndim not in (1, 2) or va.shape[1] != vb.shape[0]:
        raise ValueError(f"matmul: incompatible shapes {va.shape} @ {vb.shape}")
    out = va @ vb

    def bw(g):
        if vb.ndim == 1:
            return np.outer(g, vb), va.T @ g
        return g @ vb.T, va.T @ g

    return _emit("matmul", out, (a, b), bw)


def reshape(a, shape):
    va = value(a)
    return _emit("reshape", va.reshape(shape).copy(), (a,), lambda g: (g.reshape(va.shape),))


def transpose(a):
    va = value(a)
    if va.ndim != 2:
        raise ValueError("transpose expects a matrix")
    return _emit("transpose", va.T.copy(), (a,), lambda g: (g.T,))


def concat(xs: Sequence, axis: int = -1):
    vals = [value(x) for x in xs]
    try:
        out = np.concatenate(vals, axis=axis)
    except ValueError as e:
        raise ValueError(f"concat: {e}") from e
    ax = axis % out.ndim
    cuts = np.cumsum([v.shape[ax] for v in vals])[:-1]

    def bw(g):
        return tuple(np.split(g, cuts, axis=ax))

    return _emit("concat", out, tuple(xs), bw)


def getitem(a, idx):
    """Basic or integer-array indexing; the backward scatters with accumulation."""
    va = value(a)
    out = va[idx]
    if not isinstance(out, np.ndarray):
        out = np.asarray(out)
    else:
        out = out.copy()

    def bw(g):
        full = np.zeros_like(va)
        np.add.at(full, idx, g)
        return (full,)

    return _emit("slice", out, (a,), bw)


def take(a, rows):
    """Gather rows ``a[rows]`` along axis 0."""
    va = value(a)
    rows = np.asarray(rows, dtype=np.intp)
    out = va[rows]
    n = va.shape[0]

    def bw(g):
        return (_segment_sum_np(g, rows, n),)

    return _emit("take", out, (a,), bw)


def _segment_sum_np(x: np.ndarray, seg: np.ndarray, n: int) -> np.ndarray:
    out = np.zeros((n,) + x.shape[1:], dtype=np.float64)
    np.add.at(out, seg, x)
    return out


def segment_sum(x, seg, num_segments: int):
    """Sum rows of ``x`` into ``num_segments`` buckets given by ``seg``."""
    seg = np.asarray(seg, dtype=np.intp)
    out = _segment_sum_np(value(x), seg, num_segments)
    return _emit("segment_sum", out, (x,), lambda g: (g[seg],))


def diagonal(a):
    va = value(a)
    n = min(va.shape)

    def bw(g):
        full = np.zeros_like(va)
        full[np.arange(n), np.arange(n)] = g
        return (full,)

    return _emit("diagonal", np.diagonal(va).copy(), (a,), bw)


def sum(a, axis=None, keepdims: bool = False):
    va = value(a)
    out = np.sum(va, axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, va.shape).copy(),)

    return _emit("sum", np.asarray(out), (a,), bw)


def mean(a, axis=None, keepdims: bool = False):
    va = value(a)
    count = va.size if axis is None else np.prod([va.shape[ax] for ax in np.atleast_1d(axis)])
    return mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / count)


# ---------------------------------------------------------------- elementwise

def exp(a):
    out = np.exp(value(a))
    return _emit("exp", out, (a,), lambda g: (g * out,))


def log(a):
    va = value(a)
    if np.any(va <= 0):
        raise NumericDomainError("log of non-positive value")
    return _emit("log", np.log(va), (a,), lambda g: (g / va,))


def sqrt(a):
    va = value(a)
    if np.any(va < 0):
        raise NumericDomainError("sqrt of negative value")
    out = np.sqrt(va)

    def bw(g):
        # subgradient 0 at the origin
        safe = np.where(out > 0, out, 1.0)
        return (np.where(out > 0, g / (2.0 * safe), 0.0),)

    return _emit("sqrt", out, (a,), bw)


def abs(a):
    va = value(a)
    return _emit("abs", np.abs(va), (a,), lambda g: (g * np.sign(va),))


def pow(a, p: float):
    """``a ** p`` for a constant exponent."""
    va = value(a)
    if p != int(p) and np.any(va < 0):
        raise NumericDomainError("fractional power of negative value")
    out = va ** p
    return _emit("pow", out, (a,), lambda g: (g * p * va ** (p - 1),))


def cosh(a):
    va = value(a)
    return _emit("cosh", np.cosh(va), (a,), lambda g: (g * np.sinh(va),))


def sinh(a):
    va = value(a)
    return _emit("sinh", np.sinh(va), (a,), lambda g: (g * np.cosh(va),))


def arcosh(a):
    va = value(a)
    if np.any(va < 1):
        raise NumericDomainError("arcosh argument below 1")

    def bw(g):
        # the domain edge is reached only through a clamp, whose mask zeroes it
        d = va * va - 1.0
        safe = np.where(d > 0, d, 1.0)
        return (np.where(d > 0, g / np.sqrt(safe), 0.0),)

    return _emit("arcosh", np.arccosh(va), (a,), bw)


def arsinh(a):
    va = value(a)
    return _emit("arsinh", np.arcsinh(va), (a,), lambda g: (g / np.sqrt(1.0 + va * va),))


def cos(a):
    va = value(a)
    return _emit("cos", np.cos(va), (a,), lambda g: (-g * np.sin(va),))


def sin(a):
    va = value(a)
    return _emit("sin", np.sin(va), (a,), lambda g: (g * np.cos(va),))


def arccos(a):
    va = value(a)
    if np.any(np.abs(va) > 1):
        raise NumericDomainError("arccos argument outside [-1, 1]")

    def bw(g):
        d = 1.0 - va * va
        safe = np.where(d > 0, d, 1.0)
        return (np.where(d > 0, -g / np.sqrt(safe), 0.0),)

    return _emit("arccos", np.arccos(va), (a,), bw)


def tanh(a):
    out = np.tanh(value(a))
    return _emit("tanh", out, (a,), lambda g: (g * (1.0 - out * out),))


def softplus(a):
    va = value(a)
    out = np.logaddexp(0.0, va)
    return _emit("softplus", out, (a,), lambda g: (g / (1.0 + np.exp(-va)),))


def clamp(a, lo: float | None = None, hi: float | None = None):
    """Clip into ``[lo, hi]``; gradient passes inside and is zero on the boundary."""
    va = value(a)
    out = np.clip(va, -np.inf if lo is None else lo, np.inf if hi is None else hi)
    inside = np.ones(va.shape, dtype=bool)
    if lo is not None:
        inside &= va > lo
    if hi is not None:
        inside &= va < hi
    return _emit("clamp", out, (a,), lambda g: (np.where(inside, g, 0.0),))


def softmax(a, axis: int = -1):
    va = value(a)
    z = va - np.max(va, axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / np.sum(e, axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - np.sum(g * out, axis=axis, keepdims=True)),)

    return _emit("softmax", out, (a,), bw)


def logsumexp(a, axis: int = -1):
    """Row-max stabilised log-sum-exp along ``axis`` (axis removed)."""
    va = value(a)
    m = np.max(va, axis=axis, keepdims=True)
    e = np.exp(va - m)
    s = np.sum(e, axis=axis, keepdims=True)
    out = (np.log(s) + m).squeeze(axis)

    def bw(g):
        return (np.expand_dims(g, axis) * (e / s),)

    return _emit("logsumexp", out, (a,), bw)


# ------------------------------------------------ smooth ratio helpers
# Each has a removable singularity at 0; series branches keep value and
# derivative accurate there.

_SERIES = 1e-3


def _ratio_prim(name, va, direct, direct_d, series, series_d):
    small = np.abs(va) < _SERIES
    safe = np.where(small, 1.0, va)
    out = np.where(small, series(va), direct(safe))
    d = np.where(small, series_d(va), direct_d(safe))
    return out, d


def sinhc(a):
    """``sinh(x)/x`` with value 1 at 0."""
    va = value(a)
    out, d = _ratio_prim(
        "sinhc", va,
        lambda x: np.sinh(x) / x,
        lambda x: (x * np.cosh(x) - np.sinh(x)) / (x * x),
        lambda x: 1 + x**2 / 6 + x**4 / 120 + x**6 / 5040,
        lambda x: x / 3 + x**3 / 30 + x**5 / 840,
    )
    return _emit("sinhc", out, (a,), lambda g: (g * d,))


def sinc(a):
    """Unnormalised ``sin(x)/x`` with value 1 at 0."""
    va = value(a)
    out, d = _ratio_prim(
        "sinc", va,
        lambda x: np.sin(x) / x,
        lambda x: (x * np.cos(x) - np.sin(x)) / (x * x),
        lambda x: 1 - x**2 / 6 + x**4 / 120 - x**6 / 5040,
        lambda x: -x / 3 + x**3 / 30 - x**5 / 840,
    )
    return _emit("sinc", out, (a,), lambda g: (g * d,))


def arsinhc(a):
    """``arsinh(x)/x`` with value 1 at 0."""
    va = value(a)
    out, d = _ratio_prim(
        "arsinhc", va,
        lambda x: np.arcsinh(x) / x,
        lambda x: (x / np.sqrt(1 + x * x) - np.arcsinh(x)) / (x * x),
        lambda x: 1 - x**2 / 6 + 3 * x**4 / 40 - 5 * x**6 / 112,
        lambda x: -x / 3 + 3 * x**3 / 10 - 15 * x**5 / 56,
    )
    return _emit("arsinhc", out, (a,), lambda g: (g * d,))


def atan2c(s, t):
    """``atan2(s, t)/s`` for ``s >= 0``; finite at ``s = 0`` when ``t > 0``."""
    vs, vt = np.broadcast_arrays(value(s), value(t))
    if np.any((vs == 0) & (vt <= 0)):
        raise NumericDomainError("atan2c singular at s=0, t<=0")
    small = (np.abs(vs) < _SERIES * np.abs(vt)) & (vt > 0)
    safe_s = np.where(small, 1.0, vs)
    safe_t = np.where(small, 1.0, vt)
    u = np.where(small, vs / np.where(vt > 0, vt, 1.0), 0.0)
    tt = np.where(vt > 0, vt, 1.0)
    series = (1 - u**2 / 3 + u**4 / 5 - u**6 / 7) / tt
    series_ds = (-2 * u / 3 + 4 * u**3 / 5 - 6 * u**5 / 7) / (tt * tt)
    ang = np.arctan2(safe_s, safe_t)
    direct = ang / safe_s
    direct_ds = (safe_t / (safe_s**2 + safe_t**2) * safe_s - ang) / (safe_s * safe_s)
    out = np.where(small, series, direct)
    ds = np.where(small, series_ds, direct_ds)
    dt = -1.0 / (vs * vs + vt * vt)
    shp_s, shp_t = np.shape(value(s)), np.shape(value(t))
    return _emit("atan2c", out, (s, t),
                 lambda g: (_unbroadcast(g * ds, shp_s), _unbroadcast(g * dt, shp_t)))

